"""JSON problem documents shared by the library entry points and the CLI.

A problem document looks like::

    {
      "params": {"delta": 0.5},
      "diffusion": "brownian",
      "measure": {"atoms": [{"at": 1, "mass": "1/delta"}]},
      "pair": {"c": 1, "a": "delta"},
      "transform": {"lambda1": 1, "lambda2": 0},
      "reward": {"f": "Max(x, 0)", "limits": [0, 0]},
      "stop": {"x": [0]},
      "verify": {"checks": [...]},
      "sweep": {"param": "delta", "values": [1, 0.5], "quantity": "q_hitting", "x": 1, "y": 11},
      "mc": {"n_paths": 100000, "seed": 7}
    }

Numbers may be written as expression strings in the declared params, and
"+inf"/"-inf" stand for the infinite end points. Functions of the state are
sympy expressions in ``x``. Every error names the offending field path.
"""
from __future__ import annotations

import copy
import json
import keyword
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import sympy as sp

from .diffusion_core import SDE, DiffusionSpec, Interval, RadonMeasure, ScaleFunction, _as_array
from .errors import ValidationError

X = sp.Symbol("x", real=True)
_INF = {"+inf": math.inf, "inf": math.inf, "infinity": math.inf, "-inf": -math.inf, "-infinity": -math.inf}
_SECTIONS = {"params", "diffusion", "measure", "pair", "transform", "reward", "stop", "verify",
             "decompose", "sweep", "mc", "solver", "description", "name", "output"}


# --------------------------------------------------------------------------
# scalar and expression parsing


def _symbols(params):
    return {k: sp.Symbol(k, real=True) for k in params}


def parse_number(value, path, params=None, allow_inf=True):
    """A float from a number, "+inf"/"-inf" or an expression in the params."""
    params = params or {}
    if isinstance(value, bool):
        raise ValidationError("expected a number", field=path)
    if isinstance(value, (int, float)):
        v = float(value)
    elif isinstance(value, str):
        key = value.strip().lower()
        if key in _INF:
            v = _INF[key]
        else:
            expr = _sympify(value, path, params)
            if expr.free_symbols:
                raise ValidationError(f"unknown symbols {sorted(map(str, expr.free_symbols))}", field=path)
            try:
                v = float(expr)
            except TypeError:
                raise ValidationError("expression is not a real number", field=path) from None
    else:
        raise ValidationError("expected a number", field=path)
    if math.isnan(v) or (math.isinf(v) and not allow_inf):
        raise ValidationError("expected a finite number", field=path)
    return v


def _sympify(text, path, params, variables=()):
    loc = {str(s): s for s in variables}
    loc.update(_symbols(params))
    try:
        expr = sp.sympify(text, locals=loc)
    except (sp.SympifyError, SyntaxError, TypeError, AttributeError) as exc:
        raise ValidationError(f"cannot parse expression {text!r}: {exc}", field=path) from None
    subs = {loc[k]: sp.nsimplify(v) if isinstance(v, (int, float)) else v for k, v in params.items()}
    return expr.subs(subs)


def parse_function(text, path, params=None):
    """(numpy callable in x, sympy expression) for an expression string."""
    params = params or {}
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = repr(float(text))
    if not isinstance(text, str):
        raise ValidationError("expected an expression string", field=path)
    expr = _sympify(text, path, params, variables=(X,))
    extra = expr.free_symbols - {X}
    if extra:
        raise ValidationError(f"unknown symbols {sorted(map(str, extra))}", field=path)
    fn = sp.lambdify(X, expr, modules="numpy")

    def f(x):
        x = _as_array(x)
        with np.errstate(all="ignore"):
            out = np.asarray(fn(x), dtype=float)
        return np.broadcast_to(out, x.shape).copy() if out.shape != x.shape else out
    return f, expr


# --------------------------------------------------------------------------
# diffusion and measures


def _interval(d, path):
    if d is None:
        return Interval()
    if not isinstance(d, dict):
        raise ValidationError("interval must be an object with lo and hi", field=path)
    return Interval(parse_number(d.get("lo", "-inf"), f"{path}.lo"), parse_number(d.get("hi", "+inf"), f"{path}.hi"))


def _limit(expr, end, path, declared):
    if declared is not None:
        return parse_number(declared, path)
    point = sp.oo if end == math.inf else -sp.oo if end == -math.inf else sp.nsimplify(end)
    try:
        lim = sp.limit(expr, X, point, "-" if end > 0 or end == math.inf else "+")
    except Exception:  # sympy raises many types here
        lim = None
    if lim is None or lim.has(sp.AccumBounds) or lim.free_symbols:
        raise ValidationError("cannot determine the scale limit; declare it under scale.limits", field=path)
    if lim in (sp.oo, -sp.oo):
        return math.inf if lim == sp.oo else -math.inf
    return float(lim)


def parse_scale(d, interval, path, params):
    if d is None or d == "identity":
        return ScaleFunction.identity(interval)
    if isinstance(d, str):
        d = {"expr": d}
    if not isinstance(d, dict):
        raise ValidationError("scale must be 'identity', an expression or an object", field=path)
    kind = d.get("type", "expr" if "expr" in d else None)
    if kind == "identity":
        return ScaleFunction.identity(interval)
    if kind == "affine":
        return ScaleFunction.affine(parse_number(d.get("slope", 1.0), f"{path}.slope", params),
                                    parse_number(d.get("intercept", 0.0), f"{path}.intercept", params), interval)
    if kind == "tabulated":
        try:
            xs = [parse_number(v, f"{path}.x[{i}]", params) for i, v in enumerate(d["x"])]
            ss = [parse_number(v, f"{path}.s[{i}]", params) for i, v in enumerate(d["s"])]
        except KeyError as exc:
            raise ValidationError(f"missing {exc.args[0]}", field=f"{path}.{exc.args[0]}") from None
        return ScaleFunction.tabulated(xs, ss, interval)
    if kind == "expr":
        f, expr = parse_function(d["expr"], f"{path}.expr", params)
        dexpr = sp.diff(expr, X)
        df = sp.lambdify(X, dexpr, modules="numpy")
        lims = d.get("limits") or {}
        lo = _limit(expr, interval.lo, f"{path}.limits.lo", lims.get("lo"))
        hi = _limit(expr, interval.hi, f"{path}.limits.hi", lims.get("hi"))

        def deriv(x):
            x = _as_array(x)
            return np.broadcast_to(np.asarray(df(x), dtype=float), x.shape).copy()
        sc = ScaleFunction(f, interval, derivative=deriv, lo_limit=lo, hi_limit=hi, kind="expr",
                           description={"type": "expr", "expr": str(d["expr"])})
        sc.check_monotone()
        sc.sym = expr
        return sc
    raise ValidationError(f"unknown scale type {kind!r}", field=f"{path}.type")


def parse_measure(d, path, params, name="measure"):
    """RadonMeasure from {"density": expr | {"breaks", "values"} | null, "atoms": [...]}."""
    if d is None:
        return RadonMeasure.zero()
    if not isinstance(d, dict):
        raise ValidationError(f"{name} must be an object", field=path)
    unknown = set(d) - {"density", "atoms", "breakpoints", "support", "sample"}
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)}", field=path)
    atoms = []
    raw_atoms = d.get("atoms", [])
    if not isinstance(raw_atoms, list):
        raise ValidationError("atoms must be a list", field=f"{path}.atoms")
    for i, a in enumerate(raw_atoms):
        p = f"{path}.atoms[{i}]"
        if not isinstance(a, dict) or "at" not in a or "mass" not in a:
            raise ValidationError("atom needs 'at' and 'mass'", field=p)
        at = parse_number(a["at"], f"{p}.at", params, allow_inf=False)
        m = parse_number(a["mass"], f"{p}.mass", params, allow_inf=False)
        if not m > 0:
            raise ValidationError("atom mass must be positive", field=f"{p}.mass")
        atoms.append((at, m))
    dens = d.get("density")
    bps = [parse_number(v, f"{path}.breakpoints[{i}]", params) for i, v in enumerate(d.get("breakpoints", []))]
    support = d.get("support")
    if support is not None:
        if not isinstance(support, list) or len(support) != 2:
            raise ValidationError("support must be [lo, hi]", field=f"{path}.support")
        support = (parse_number(support[0], f"{path}.support[0]", params),
                   parse_number(support[1], f"{path}.support[1]", params))
    if dens is None:
        return RadonMeasure(atoms=atoms, description={"density": None, "atoms": _atoms_json(atoms)})
    if isinstance(dens, dict):
        if "breaks" not in dens or "values" not in dens:
            raise ValidationError("piecewise density needs breaks and values", field=f"{path}.density")
        br = [parse_number(v, f"{path}.density.breaks[{i}]", params) for i, v in enumerate(dens["breaks"])]
        va = [parse_number(v, f"{path}.density.values[{i}]", params, allow_inf=False)
              for i, v in enumerate(dens["values"])]
        return RadonMeasure.piecewise_constant(br, va, atoms=atoms)
    f, expr = parse_function(dens, f"{path}.density", params)
    if expr.is_number:
        rate = float(expr)
        if rate < 0:
            raise ValidationError("density must be non-negative", field=f"{path}.density")
        if rate == 0:
            return RadonMeasure(atoms=atoms, description={"density": None, "atoms": _atoms_json(atoms)})
        return RadonMeasure.lebesgue(rate, support=support, atoms=atoms)
    lo, hi = support if support is not None else (-math.inf, math.inf)

    def dens_fn(x):
        x = _as_array(x)
        return np.where((x >= lo) & (x <= hi), np.maximum(f(x), 0.0), 0.0)
    probe = np.linspace(max(lo, -20.0), min(hi, 20.0), 401)
    if np.any(f(probe) < -1e-12):
        raise ValidationError("density must be non-negative", field=f"{path}.density")
    bps += [b for b in (lo, hi) if np.isfinite(b)]
    return RadonMeasure(dens_fn, atoms=atoms, breakpoints=bps, support=support,
                        description={"density": str(dens), "support": None if support is None else list(support),
                                     "atoms": _atoms_json(atoms)})


def _atoms_json(atoms):
    return [{"at": a, "mass": m} for a, m in atoms]


def parse_diffusion(d, path="diffusion", params=None):
    params = params or {}
    if d is None or d == "brownian":
        return DiffusionSpec.brownian()
    if not isinstance(d, dict):
        raise ValidationError("diffusion must be 'brownian' or an object", field=path)
    if d.get("type") == "brownian":
        return DiffusionSpec.brownian(_interval(d.get("interval"), f"{path}.interval"))
    unknown = set(d) - {"interval", "scale", "speed", "sde", "type"}
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)}", field=path)
    iv = _interval(d.get("interval"), f"{path}.interval")
    scale = parse_scale(d.get("scale"), iv, f"{path}.scale", params)
    sde = None
    if d.get("sde") is not None:
        sd = d["sde"]
        if not isinstance(sd, dict) or "drift" not in sd or "sigma" not in sd:
            raise ValidationError("sde needs drift and sigma", field=f"{path}.sde")
        b, bexpr = parse_function(sd["drift"], f"{path}.sde.drift", params)
        s, sexpr = parse_function(sd["sigma"], f"{path}.sde.sigma", params)
        sde = SDE(b, s, {"drift": str(sd["drift"]), "sigma": str(sd["sigma"])})
    speed_d = d.get("speed")
    if speed_d is None:
        sym = getattr(scale, "sym", None) if scale.kind == "expr" else (X if scale.kind == "identity" else None)
        if sde is None or sym is None:
            raise ValidationError("speed measure required (or an SDE with an expression scale)",
                                  field=f"{path}.speed")
        # m(dx) = 2 / (sigma^2 s') dx
        mexpr = sp.simplify(2 / (sexpr ** 2 * sp.diff(sym, X)))
        speed = parse_measure({"density": str(mexpr)}, f"{path}.speed", params, "speed")
    else:
        speed = parse_measure(speed_d, f"{path}.speed", params, "speed")
    spec = DiffusionSpec(iv, scale, speed, sde)
    if sde is not None:
        try:
            spec.check_consistency()
        except ValidationError as exc:
            raise ValidationError(str(exc), field=f"{path}.{exc.field or 'sde'}") from None
    return spec


# --------------------------------------------------------------------------
# problem document


@dataclass
class Problem:
    doc: dict
    params: dict
    spec: DiffusionSpec
    mu: RadonMeasure
    source: Optional[str] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def section(self, name, required=False):
        sec = self.doc.get(name)
        if sec is None:
            if required:
                raise ValidationError(f"problem has no '{name}' section", field=name)
            return {}
        if not isinstance(sec, dict):
            raise ValidationError(f"'{name}' must be an object", field=name)
        return sec

    def number(self, section, key, default=None, allow_inf=True):
        sec = self.section(section)
        if key not in sec:
            if default is None:
                raise ValidationError(f"missing {key}", field=f"{section}.{key}")
            return default
        return parse_number(sec[key], f"{section}.{key}", self.params, allow_inf)

    def numbers(self, section, key, default=None):
        sec = self.section(section)
        vals = sec.get(key, default)
        if vals is None:
            raise ValidationError(f"missing {key}", field=f"{section}.{key}")
        if not isinstance(vals, list):
            vals = [vals]
        return [parse_number(v, f"{section}.{key}[{i}]", self.params) for i, v in enumerate(vals)]

    def function(self, section, key):
        sec = self.section(section, required=True)
        if key not in sec:
            raise ValidationError(f"missing {key}", field=f"{section}.{key}")
        return parse_function(sec[key], f"{section}.{key}", self.params)[0]

    def with_params(self, **kw):
        doc = copy.deepcopy(self.doc)
        doc.setdefault("params", {}).update(kw)
        return parse_problem(doc, source=self.source)

    # builders -----------------------------------------------------------
    def pair_problem(self, direction):
        from .ie_solver import PairProblem
        sec = self.section("pair")
        kappa = sec.get("kappa")
        if isinstance(kappa, dict):
            kappa = kappa.get(direction)
        kappa = None if kappa is None else parse_number(kappa, "pair.kappa", self.params, allow_inf=False)
        vals = {}
        for key, default in (("c", 0.0), ("a", 1.0)):
            v, path = sec.get(key, default), f"pair.{key}"
            if isinstance(v, dict):
                # per-direction normalisation
                v, path = v.get(direction, default), f"pair.{key}.{direction}"
            vals[key] = parse_number(v, path, self.params, allow_inf=False)
        try:
            return PairProblem(self.spec, self.mu, direction, c=vals["c"], a=vals["a"], kappa=kappa)
        except ValidationError as exc:
            raise ValidationError(str(exc), field=f"pair.{exc.field}") from None

    def anchor(self):
        c = self.section("pair").get("c", 0.0)
        if isinstance(c, dict):
            c = c.get("increasing", 0.0)
        return parse_number(c, "pair.c", self.params, allow_inf=False)

    def solver_options(self):
        sec = self.section("solver")
        out = {}
        for key in ("step", "tol", "dx_max"):
            if key in sec:
                out[key] = parse_number(sec[key], f"solver.{key}", self.params, allow_inf=False)
                if not out[key] > 0:
                    raise ValidationError(f"{key} must be positive", field=f"solver.{key}")
        return out

    def solve_pair(self, direction):
        key = ("pair", direction)
        if key not in self._cache:
            from .ie_solver import solve
            self._cache[key] = solve(self.pair_problem(direction), **self.solver_options())
        return self._cache[key]

    def lambdas(self, section="transform"):
        l1 = self.number(section, "lambda1", None) if "lambda1" in self.section(section) else None
        l2 = self.number(section, "lambda2", None) if "lambda2" in self.section(section) else None
        if l1 is None and l2 is None:
            l1, l2 = 1.0, 0.0
        return (l1 or 0.0), (l2 or 0.0)

    def general_solution(self, section="transform"):
        from .ie_solver import combine
        l1, l2 = self.lambdas(section)
        if l1 < 0 or l2 < 0 or not l1 + l2 > 0:
            raise ValidationError("need lambda1, lambda2 >= 0, not both zero", field=f"{section}.lambda1")
        if l2 == 0:
            return self.solve_pair("increasing")
        if l1 == 0:
            return self.solve_pair("decreasing")
        return combine(l1, l2, self.solve_pair("increasing"), self.solve_pair("decreasing"))

    def transformed(self, section="transform"):
        key = ("td", section)
        if key not in self._cache:
            from .transform import transform
            self._cache[key] = transform(self.spec, self.general_solution(section))
        return self._cache[key]

    def reward(self):
        from .optimal_stopping import RewardSpec
        sec = self.section("reward", required=True)
        f = self.function("reward", "f")
        lim = sec.get("limits", "auto")
        if lim != "auto":
            if not isinstance(lim, list) or len(lim) != 2:
                raise ValidationError("limits must be 'auto' or [lo, hi]", field="reward.limits")
            lim = (parse_number(lim[0], "reward.limits[0]", self.params, allow_inf=False),
                   parse_number(lim[1], "reward.limits[1]", self.params, allow_inf=False))
        return RewardSpec(f, lim, description=str(sec["f"]))

    def sim_config(self, **overrides):
        from .mc_verify import SimConfig
        sec = dict(self.section("mc"))
        sec.update({k: v for k, v in overrides.items() if v is not None})
        known = set(SimConfig.__dataclass_fields__)
        unknown = set(sec) - known
        if unknown:
            raise ValidationError(f"unknown keys {sorted(unknown)}", field="mc")
        kw = {}
        for k, v in sec.items():
            if k in ("scheme",):
                kw[k] = v
            elif k in ("n_paths", "seed", "batch_size", "max_steps", "n_jobs"):
                if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
                    raise ValidationError("expected an integer", field=f"mc.{k}")
                kw[k] = int(v)
            elif v is None:
                kw[k] = None
            else:
                kw[k] = parse_number(v, f"mc.{k}", self.params)
        return SimConfig(**kw)


def parse_problem(doc: Any, source=None) -> Problem:
    if not isinstance(doc, dict):
        raise ValidationError("problem document must be a JSON object", field="$")
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise ValidationError(f"unknown sections {sorted(unknown)}", field=sorted(unknown)[0])
    params = doc.get("params", {}) or {}
    if not isinstance(params, dict):
        raise ValidationError("params must be an object", field="params")
    clean = {}
    for k, v in params.items():
        if not k.isidentifier() or keyword.iskeyword(k) or k == "x":
            raise ValidationError("parameter names must be identifiers other than x and Python keywords", field=f"params.{k}")
        clean[k] = parse_number(v, f"params.{k}", {}, allow_inf=False)
    spec = parse_diffusion(doc.get("diffusion"), "diffusion", clean)
    mu = parse_measure(doc.get("measure"), "measure", clean)
    return Problem(doc, clean, spec, mu, source)


def load_problem(path) -> Problem:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"problem file not found: {path}", field="problem") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid JSON: {exc}", field="problem") from None
    return parse_problem(doc, source=str(path))


def bundled_problem(name):
    """Path of a problem file shipped with the package."""
    from importlib.resources import files
    p = files("iwpairs").joinpath("problems", name if name.endswith(".json") else name + ".json")
    if not p.is_file():
        raise ValidationError(f"no bundled problem {name!r}", field="problem")
    return str(p)


# --------------------------------------------------------------------------
# emitted artifacts


_REQUIRED = {
    "PairSolution": ("mesh", "g", "p_minus", "p_plus", "kappa", "direction", "c", "a"),
    "GeneralSolution": ("lambda1", "lambda2", "gr", "gl"),
    "TransformedDiffusion": ("c", "u_l", "u_r", "transient", "x", "s_g"),
    "StoppingSolution": ("knots", "contact_set", "stopping_region", "optimal_flag", "V"),
    "VerifyReport": ("checks", "passed"),
    "Decomposition": ("lambda1", "lambda2"),
    "SweepResult": ("param", "quantity", "rows"),
    "Error": ("error",),
}


def _ext(v):
    if isinstance(v, str):
        return _INF.get(v.lower(), math.nan)
    return float(v)


def validate_artifact(doc):
    """Check an emitted JSON document; returns the re-loaded object when one exists."""
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ValidationError("artifact needs a 'kind'", field="kind")
    kind = doc["kind"]
    if kind not in _REQUIRED:
        raise ValidationError(f"unknown artifact kind {kind!r}", field="kind")
    for key in _REQUIRED[kind]:
        if key not in doc:
            raise ValidationError(f"missing field {key}", field=key)
    if kind == "PairSolution":
        from .ie_solver import PairSolution
        sol = PairSolution.from_json(doc)
        return sol
    if kind == "GeneralSolution":
        validate_artifact(doc["gr"])
        validate_artifact(doc["gl"])
    if kind == "TransformedDiffusion":
        x = np.asarray(doc["x"], dtype=float)
        s = np.asarray([_ext(v) for v in doc["s_g"]])
        if x.shape != s.shape or np.any(np.diff(x) <= 0) or np.any(np.diff(s) <= 0):
            raise ValidationError("s_g table must be strictly increasing on an increasing grid", field="s_g")
        ul, ur = _ext(doc["u_l"]), _ext(doc["u_r"])
        if not (ul <= s.min() and s.max() <= ur):
            raise ValidationError("s_g table outside (u_l, u_r)", field="s_g")
    if kind == "StoppingSolution":
        V = doc["V"]
        if not isinstance(V, dict) or len(V.get("x", [])) != len(V.get("V", [None])):
            raise ValidationError("V table needs matching x and V columns", field="V")
        for i, r in enumerate(doc["stopping_region"]):
            if len(r) != 2 or not _ext(r[0]) <= _ext(r[1]):
                raise ValidationError("bad region interval", field=f"stopping_region[{i}]")
        if not isinstance(doc["optimal_flag"], bool):
            raise ValidationError("optimal_flag must be boolean", field="optimal_flag")
    if kind == "VerifyReport":
        for i, c in enumerate(doc["checks"]):
            for key in ("name", "mean", "se", "n", "flags", "pass"):
                if key not in c:
                    raise ValidationError(f"missing field {key}", field=f"checks[{i}].{key}")
    if kind == "SweepResult":
        for i, r in enumerate(doc["rows"]):
            if not isinstance(r, dict) or doc["param"] not in r:
                raise ValidationError("row lacks the swept parameter", field=f"rows[{i}]")
    return doc


def load_artifact(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid JSON: {exc}", field="artifact") from None
    return validate_artifact(doc)


def dump_json(obj, path=None):
    """Serialise with sorted keys and +-inf as strings (byte-stable)."""
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "+inf" if v > 0 else "-inf"
        return v + 0.0
    return obj


def silence_warnings():
    warnings.filterwarnings("ignore", category=RuntimeWarning, module="iwpairs")

"""Command line front end.

    iwpairs <command> --problem FILE [--out PREFIX] [--seed N] [--tol X] [--paths N]

Commands: solve-pair, transform, stop, verify, decompose, sweep. Flags can
also come from IWPAIRS_PROBLEM, IWPAIRS_OUT, IWPAIRS_SEED, IWPAIRS_TOL and
IWPAIRS_PATHS; an explicit flag wins over the environment, which wins over
the problem file. A summary JSON goes to stdout; with --out the full JSON
and CSV artifacts are written to PREFIX.<command>.json / .csv.

Exit codes: 0 ok, 2 invalid input, 3 numerical failure, 4 Monte Carlo check failed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io as _io
import math
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import io as pio
from .errors import IWError, MCAcceptanceError, ValidationError

COMMANDS = ("solve-pair", "transform", "stop", "verify", "decompose", "sweep")
ENV_PREFIX = "IWPAIRS_"


@dataclass
class RunConfig:
    command: str
    problem: str
    output: Optional[str] = None
    seed: Optional[int] = None
    tol: Optional[float] = None
    paths: Optional[int] = None
    n_jobs: Optional[int] = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValidationError(f"unknown command {self.command!r}", field="command")
        if not self.problem:
            raise ValidationError("no problem file given", field="problem")


# --------------------------------------------------------------------------
# helpers


def _resolve_problem(path):
    if os.path.exists(path):
        return pio.load_problem(path)
    try:
        return pio.load_problem(pio.bundled_problem(path))
    except ValidationError:
        raise ValidationError(f"problem file not found: {path}", field="problem") from None


def _write(cfg, suffix, text):
    if cfg.output is None:
        return None
    path = f"{cfg.output}.{suffix}"
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _csv(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _solver_kw(prob, cfg):
    kw = prob.solver_options()
    if cfg.tol is not None:
        kw["tol"] = cfg.tol
    return kw


def _grid(prob, section, default_center):
    sec = prob.section(section)
    if "grid" in sec:
        g = sec["grid"]
        if isinstance(g, dict):
            lo = pio.parse_number(g.get("lo"), f"{section}.grid.lo", prob.params, allow_inf=False)
            hi = pio.parse_number(g.get("hi"), f"{section}.grid.hi", prob.params, allow_inf=False)
            n = int(g.get("n", 201))
            pts = np.linspace(lo, hi, n)
        else:
            pts = np.asarray(prob.numbers(section, "grid"), dtype=float)
    else:
        iv = prob.spec.interval
        lo = max(default_center - 5.0, iv.lo + 1e-3 if np.isfinite(iv.lo) else -np.inf)
        hi = min(default_center + 5.0, iv.hi - 1e-3 if np.isfinite(iv.hi) else np.inf)
        pts = np.linspace(lo, hi, 201)
    extra = prob.numbers(section, "x", []) if "x" in sec else []
    return np.unique(np.concatenate([pts, np.asarray(extra, dtype=float)]))


def _pair(prob, direction, cfg, factor=1.0):
    from .ie_solver import solve
    key = ("pair", direction, factor)
    if key not in prob._cache:
        pp = prob.pair_problem(direction)
        if factor != 1.0:
            pp = dataclasses.replace(pp, a=pp.a * factor)
        prob._cache[key] = solve(pp, **_solver_kw(prob, cfg))
    return prob._cache[key]


def _td(prob, cfg, section="transform"):
    from .ie_solver import combine
    from .transform import transform
    key = ("td", section)
    if key not in prob._cache:
        l1, l2 = prob.lambdas(section)
        if l1 < 0 or l2 < 0 or not l1 + l2 > 0:
            raise ValidationError("need lambda1, lambda2 >= 0, not both zero", field=f"{section}.lambda1")
        if l2 == 0:
            g = _pair(prob, "increasing", cfg, l1)
        elif l1 == 0:
            g = _pair(prob, "decreasing", cfg, l2)
        else:
            g = combine(l1, l2, _pair(prob, "increasing", cfg), _pair(prob, "decreasing", cfg))
        prob._cache[key] = transform(prob.spec, g)
    return prob._cache[key]


# --------------------------------------------------------------------------
# commands


def cmd_solve_pair(prob, cfg):
    sec = prob.section("pair")
    which = sec.get("direction", "both")
    if which not in ("increasing", "decreasing", "both"):
        raise ValidationError("direction must be increasing, decreasing or both", field="pair.direction")
    dirs = ("increasing", "decreasing") if which == "both" else (which,)
    summary = {"kind": "PairSummary", "solutions": {}}
    for d in dirs:
        sol = _pair(prob, d, cfg)
        tag = "gr" if d == "increasing" else "gl"
        _write(cfg, f"{tag}.json", pio.dump_json(sol.to_json()))
        _write(cfg, f"{tag}.csv", sol.to_csv())
        ent = {"kappa": sol.kappa, "c": sol.c, "a": sol.a, "nodes": int(sol.mesh.size),
               "regime": sol.info.get("regime") if sol.info else None}
        if "x" in sec:
            xs = prob.numbers("pair", "x")
            ent["values"] = {repr(x): float(sol(np.array([x]))[0]) for x in xs}
        summary["solutions"][d] = ent
    return summary, 0


def cmd_transform(prob, cfg):
    td = _td(prob, cfg)
    grid = _grid(prob, "transform", td.c)
    _write(cfg, "transform.json", pio.dump_json(td.to_json(grid)))
    _write(cfg, "transform.csv", td.to_csv(grid))
    out = {"kind": "TransformSummary", "u_l": td.u_l, "u_r": td.u_r, "transient": td.transient,
           "attainable": td.attainable}
    if td.transient:
        from .transform import q_boundary_probabilities
        pts = prob.numbers("transform", "x", [td.c])
        out["boundary_probabilities"] = {repr(x): list(q_boundary_probabilities(td, x)) for x in pts}
    return out, 0


def _stopping(prob, cfg):
    from .optimal_stopping import solve as stop_solve
    key = "stop"
    if key not in prob._cache:
        l1, l2 = prob.lambdas("stop") if ("lambda1" in prob.section("stop") or "lambda2" in prob.section("stop")) \
            else prob.lambdas("transform")
        sec = prob.section("stop")
        kw = {}
        if "step" in sec:
            kw["step"] = prob.number("stop", "step", allow_inf=False)
        gr = _pair(prob, "increasing", cfg)
        gl = _pair(prob, "decreasing", cfg)
        prob._cache[key] = stop_solve(prob.spec, prob.mu, prob.reward(), l1, l2,
                                      c=prob.anchor(), gr=gr, gl=gl, **kw)
    return prob._cache[key]


def cmd_stop(prob, cfg):
    sol = _stopping(prob, cfg)
    grid = _grid(prob, "stop", sol.td.c)
    _write(cfg, "stop.json", pio.dump_json(sol.to_json(grid)))
    _write(cfg, "stop.csv", sol.to_csv(grid))
    xs = prob.numbers("stop", "x", [sol.td.c])
    out = {"kind": "StopSummary", "verdict": sol.verdict,
           "stopping_region": [[a, b] for a, b in sol.region],
           "V": {repr(x): float(sol.value(np.array([x]))[0]) for x in xs}}
    return out, 0


def _g_for(prob, cfg, spec_g, path):
    if spec_g in (None, "transform"):
        return _td(prob, cfg).g
    if spec_g == "increasing":
        return _pair(prob, "increasing", cfg)
    if spec_g == "decreasing":
        return _pair(prob, "decreasing", cfg)
    return pio.parse_function(spec_g, path, prob.params)[0]


def _check(prob, cfg, i, chk):
    from . import mc_verify as mc
    from .transform import local_time_terminal_rate, q_hitting_probability
    path = f"verify.checks[{i}]"
    if not isinstance(chk, dict) or "type" not in chk:
        raise ValidationError("check needs a type", field=path)
    typ = chk["type"]

    def num(key, default=None, allow_inf=False):
        if key not in chk:
            if default is None:
                raise ValidationError(f"missing {key}", field=f"{path}.{key}")
            return default
        return pio.parse_number(chk[key], f"{path}.{key}", prob.params, allow_inf)

    over = dict(chk.get("mc", {}))
    if cfg.seed is not None:
        over["seed"] = cfg.seed
    if cfg.paths is not None:
        over["n_paths"] = cfg.paths
    if cfg.n_jobs is not None:
        over["n_jobs"] = cfg.n_jobs
    sim = prob.sim_config(**over)
    name = chk.get("name", f"{typ}_{i}")
    results = []
    if typ == "pair_value":
        d = chk.get("direction", "increasing")
        x, c = num("x"), num("c")
        sol = _pair(prob, d, cfg)
        target = float(sol(np.array([x]))[0] / sol(np.array([c]))[0])
        results.append((name, mc.estimate_pair_value(prob.spec, prob.mu, x, c, sim, direction=d), target))
    elif typ == "martingale":
        g = _g_for(prob, cfg, chk.get("g"), f"{path}.g")
        r = mc.martingale_check(prob.spec, g, prob.mu, num("x"), num("a"), num("b"), sim)
        results.append((name, r, 0.0))
    elif typ == "q_hitting":
        td = _td(prob, cfg)
        x, y = num("x"), num("y")
        results.append((name, mc.estimate_q_hitting(td, x, y, sim), q_hitting_probability(td, x, y)))
    elif typ == "local_time":
        td = _td(prob, cfg)
        y = num("y")
        lt = mc.estimate_local_time_total(td, y, sim)
        results.append((name + "_mean", lt.mean, 1.0 / local_time_terminal_rate(td, y)))
        results.append((name + "_cv", lt.cv, 1.0))
    elif typ == "stopping":
        x = num("x")
        rule = chk.get("rule", "optimal")
        if rule == "optimal":
            sol = _stopping(prob, cfg)
            region = sol.region
            target = float(sol.value(np.array([x]))[0])
        else:
            if not isinstance(rule, list):
                raise ValidationError("rule must be 'optimal' or a list of [lo, hi]", field=f"{path}.rule")
            region = [(pio.parse_number(r[0], f"{path}.rule[{k}][0]", prob.params),
                       pio.parse_number(r[1], f"{path}.rule[{k}][1]", prob.params)) for k, r in enumerate(rule)]
            target = None
        f = prob.reward().f
        results.append((name, mc.estimate_stopping_value(prob.spec, prob.mu, f, region, x, sim), target))
    else:
        raise ValidationError(f"unknown check type {typ!r}", field=f"{path}.type")
    if "target" in chk:
        tgt = num("target")
        results = [(n, r, tgt if k == 0 else t) for k, (n, r, t) in enumerate(results)]
    return results


def cmd_verify(prob, cfg):
    from .mc_verify import append_log
    checks = prob.section("verify", required=True).get("checks")
    if not isinstance(checks, list) or not checks:
        raise ValidationError("verify.checks must be a non-empty list", field="verify.checks")
    k = pio.parse_number(prob.section("verify").get("k", 3.0), "verify.k", prob.params, allow_inf=False)
    rows = []
    for i, chk in enumerate(checks):
        for name, res, target in _check(prob, cfg, i, chk):
            ok = None if target is None else bool(res.within(target, k))
            z = None if target is None or res.std_error == 0 else (res.mean - target) / res.std_error
            rows.append({"name": name, "mean": res.mean, "se": res.std_error, "n": res.n_effective,
                         "flags": res.flags, "target": target, "z": z, "pass": ok})
            if cfg.output is not None:
                append_log(f"{cfg.output}.mc_log.csv", name, res, target, k)
    passed = all(r["pass"] is not False for r in rows)
    report = {"kind": "VerifyReport", "k": k, "checks": rows, "passed": passed}
    _write(cfg, "verify.json", pio.dump_json(report))
    _write(cfg, "verify.csv", _csv(["name", "mean", "se", "n", "target", "z", "pass"],
                                   [[r["name"], r["mean"], r["se"], r["n"], "" if r["target"] is None else r["target"],
                                     "" if r["z"] is None else r["z"], "" if r["pass"] is None else r["pass"]]
                                    for r in rows]))
    return report, (0 if passed else MCAcceptanceError.exit_code)


def cmd_decompose(prob, cfg):
    from .ie_solver import fit_decomposition
    sec = prob.section("decompose", required=True)
    if "samples" in sec:
        s = sec["samples"]
        if not isinstance(s, list) or len(s) != 2 or any(not isinstance(p, list) or len(p) != 2 for p in s):
            raise ValidationError("samples must be [[x0, g0], [x1, g1]]", field="decompose.samples")
        samples = [tuple(pio.parse_number(v, f"decompose.samples[{i}][{j}]", prob.params, allow_inf=False)
                         for j, v in enumerate(p)) for i, p in enumerate(s)]
    elif "g" in sec:
        g = prob.function("decompose", "g")
        at = prob.numbers("decompose", "at")
        if len(at) != 2:
            raise ValidationError("need two sample points", field="decompose.at")
        samples = [(x, float(g(np.array([x]))[0])) for x in at]
    else:
        raise ValidationError("decompose needs samples or g", field="decompose")
    samples.sort()
    l1, l2 = fit_decomposition(samples[0], samples[1], _pair(prob, "increasing", cfg), _pair(prob, "decreasing", cfg))
    out = {"kind": "Decomposition", "lambda1": l1, "lambda2": l2, "samples": samples}
    _write(cfg, "decompose.json", pio.dump_json(out))
    return out, 0


def _quantity(prob, cfg, sec):
    from .transform import local_time_terminal_rate, q_boundary_probabilities, q_hitting_probability
    q = sec.get("quantity")

    def num(key):
        if key not in sec:
            raise ValidationError(f"missing {key}", field=f"sweep.{key}")
        return pio.parse_number(sec[key], f"sweep.{key}", prob.params, allow_inf=False)

    if q == "q_hitting":
        return q_hitting_probability(_td(prob, cfg), num("x"), num("y"))
    if q == "boundary_probability":
        side = sec.get("side", "hi")
        if side not in ("lo", "hi"):
            raise ValidationError("side must be lo or hi", field="sweep.side")
        p = q_boundary_probabilities(_td(prob, cfg), num("x"))
        return p[0] if side == "lo" else p[1]
    if q == "drift":
        return float(_td(prob, cfg).drift_g(np.array([num("x")]))[0])
    if q == "local_time_mean":
        return 1.0 / local_time_terminal_rate(_td(prob, cfg), num("y"))
    if q == "pair":
        d = sec.get("direction", "increasing")
        return float(_pair(prob, d, cfg)(np.array([num("x")]))[0])
    if q == "stop_value":
        return float(_stopping(prob, cfg).value(np.array([num("x")]))[0])
    raise ValidationError(f"unknown sweep quantity {q!r}", field="sweep.quantity")


def cmd_sweep(prob, cfg):
    sec = prob.section("sweep", required=True)
    param = sec.get("param")
    if param not in prob.params:
        raise ValidationError("sweep.param must name a declared parameter", field="sweep.param")
    vals = prob.numbers("sweep", "values")
    rows = []
    for v in vals:
        p = prob.with_params(**{param: v})
        val = _quantity(p, cfg, p.section("sweep"))
        row = {param: v, sec["quantity"]: val}
        if "target" in sec:
            t = pio.parse_number(sec["target"], "sweep.target", p.params, allow_inf=False)
            row["target"] = t
            row["abs_err"] = abs(val - t)
        rows.append(row)
    header = list(rows[0].keys())
    _write(cfg, "sweep.csv", _csv(header, [[r[h] for h in header] for r in rows]))
    out = {"kind": "SweepResult", "param": param, "quantity": sec["quantity"], "rows": rows}
    _write(cfg, "sweep.json", pio.dump_json(out))
    return out, 0


_DISPATCH = {"solve-pair": cmd_solve_pair, "transform": cmd_transform, "stop": cmd_stop,
             "verify": cmd_verify, "decompose": cmd_decompose, "sweep": cmd_sweep}


def run(cfg: RunConfig, stdout=None):
    """Execute one command; returns the exit status."""
    stdout = stdout or sys.stdout
    try:
        prob = _resolve_problem(cfg.problem)
        summary, status = _DISPATCH[cfg.command](prob, cfg)
        stdout.write(pio.dump_json(summary))
        return status
    except IWError as exc:
        return _fail(cfg, exc.to_dict(), exc.exit_code, stdout)
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(cfg, {"type": type(exc).__name__, "message": str(exc)}, 3, stdout)


def _fail(cfg, err, code, stdout):
    doc = {"kind": "Error", "exit_code": code, "error": err}
    text = pio.dump_json(doc)
    try:
        _write(cfg, "error.json", text)
    except OSError:
        pass
    stdout.write(text)
    return code


# --------------------------------------------------------------------------
# argument handling


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", help="problem JSON file (or name of a bundled problem)")
    common.add_argument("--out", help="output path prefix")
    common.add_argument("--seed", type=int)
    common.add_argument("--tol", type=float, help="truncation tolerance for the pair solver")
    common.add_argument("--paths", type=int, help="Monte Carlo path count")
    common.add_argument("--jobs", type=int, help="parallel workers for Monte Carlo")
    p = argparse.ArgumentParser(prog="iwpairs", description="Ito-Watanabe pairs, path transforms and optimal stopping")
    sub = p.add_subparsers(dest="command", required=True)
    for c in COMMANDS:
        sub.add_parser(c, parents=[common])
    return p


def _env(name, conv):
    v = os.environ.get(ENV_PREFIX + name)
    if v is None or v == "":
        return None
    try:
        return conv(v)
    except ValueError:
        raise ValidationError(f"bad value for {ENV_PREFIX + name}", field=ENV_PREFIX + name) from None


def config_from_args(argv=None) -> RunConfig:
    a = _parser().parse_args(argv)

    def pick(flag, name, conv):
        return flag if flag is not None else _env(name, conv)
    return RunConfig(a.command, pick(a.problem, "PROBLEM", str), pick(a.out, "OUT", str),
                     pick(a.seed, "SEED", int), pick(a.tol, "TOL", float), pick(a.paths, "PATHS", int),
                     pick(a.jobs, "JOBS", int))


def main(argv=None):
    try:
        cfg = config_from_args(argv)
    except ValidationError as exc:
        sys.stdout.write(pio.dump_json({"kind": "Error", "exit_code": 2, "error": exc.to_dict()}))
        return 2
    if cfg.tol is not None and not (cfg.tol > 0 and math.isfinite(cfg.tol)):
        sys.stdout.write(pio.dump_json({"kind": "Error", "exit_code": 2,
                                        "error": {"type": "ValidationError", "message": "tol must be positive",
                                                  "field": "tol"}}))
        return 2
    return run(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

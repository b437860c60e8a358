"""Integral equations for Ito-Watanabe pairs.

The increasing solution g_r solves, for y-kernel v_c(x, y) = s(x v y) - s(c v y),

    g(x) = a + kappa (s(x) - s(c)) + int v_c(x, y) g(y) mu(dy),

equivalently dg = p ds, dp = g dmu with p the right s-derivative. The
decreasing solution g_l is obtained by reflecting x -> -x, which maps the
decreasing problem onto an increasing one.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import PchipInterpolator

from ._march import run_march
from ._quadrature import adaptive_gauss
from .diffusion_core import (DiffusionSpec, RadonMeasure, _as_array, _ext_json,
                             classify_boundaries)
from .errors import (KappaZeroRegime, KernelIterationError, NotItoWatanabePairError,
                     OutOfRangeError, ScaleDegenerateError, SingularDecompositionError,
                     TruncationError, ValidationError)

DIRECTIONS = ("increasing", "decreasing")
_GX4, _GW4 = leggauss(4)


# --------------------------------------------------------------------------
# problem and solution containers


@dataclass(frozen=True)
class PairProblem:
    spec: DiffusionSpec
    mu: RadonMeasure
    direction: str = "increasing"
    c: float = 0.0
    a: float = 1.0
    kappa: Optional[float] = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValidationError("direction must be 'increasing' or 'decreasing'", field="direction")
        if not (np.isfinite(self.a) and self.a > 0):
            raise ValidationError("normalisation value a must be positive", field="a")
        self.spec.interval.check_interior(self.c, "c")

    def reflected(self):
        return PairProblem(self.spec.reflected(), self.mu.reflected(),
                           "decreasing" if self.direction == "increasing" else "increasing",
                           -self.c, self.a, None if self.kappa is None else -self.kappa)


def _hermite(s, s0, s1, g0, g1, m0, m1, deriv=False):
    h = s1 - s0
    t = np.where(h > 0, (s - s0) / np.where(h > 0, h, 1.0), 0.0)
    if not deriv:
        t2 = t * t
        t3 = t2 * t
        return ((2 * t3 - 3 * t2 + 1) * g0 + (t3 - 2 * t2 + t) * h * m0
                + (-2 * t3 + 3 * t2) * g1 + (t3 - t2) * h * m1)
    hh = np.where(h > 0, h, 1.0)
    return ((6 * t * t - 6 * t) * g0 / hh + (3 * t * t - 4 * t + 1) * m0
            + (-6 * t * t + 6 * t) * g1 / hh + (3 * t * t - 2 * t) * m1)


class PairSolution:
    """Mesh representation of a solution with one-sided s-derivatives.

    Between nodes g is the cubic Hermite interpolant in the s-variable using
    p_plus at the left node and p_minus at the right node. Outside the mesh
    the solution is continued affinely in s, which is exact when mu puts no
    mass beyond the mesh end.
    """

    def __init__(self, mesh, s, g, p_minus, p_plus, kappa, direction, c, a,
                 spec=None, mu=None, info=None, mu_fingerprint=None):
        self.mesh = np.asarray(mesh, dtype=float)
        self.s = np.asarray(s, dtype=float)
        self.g = np.asarray(g, dtype=float)
        self.p_minus = np.asarray(p_minus, dtype=float)
        self.p_plus = np.asarray(p_plus, dtype=float)
        self.kappa = float(kappa)
        self.direction = direction
        self.c = float(c)
        self.a = float(a)
        self.spec = spec
        self.mu = mu
        self.info = dict(info or {})
        self.mu_fingerprint = mu_fingerprint if mu_fingerprint is not None else (
            mu.fingerprint if mu is not None else None)
        n = self.mesh.size
        if n < 1 or any(arr.shape != (n,) for arr in (self.s, self.g, self.p_minus, self.p_plus)):
            raise ValidationError("PairSolution arrays must share the mesh length", field="mesh")
        if n > 1 and np.any(np.diff(self.mesh) <= 0):
            raise ValidationError("mesh must be strictly increasing", field="mesh")
        self._table_scale = None

    # scale access ---------------------------------------------------------
    def scale(self, x):
        x = _as_array(x)
        if self.spec is not None:
            return self.spec.scale(x)
        if self._table_scale is None:
            self._table_scale = PchipInterpolator(self.mesh, self.s, extrapolate=True)
        return self._table_scale(x)

    @property
    def lo(self):
        return self.mesh[0]

    @property
    def hi(self):
        return self.mesh[-1]

    def _continuation_ok(self, side):
        if self.mu is None or self.spec is None:
            return False
        iv = self.spec.interval
        if side == "lo":
            return not self.mu.has_mass(iv.lo, self.lo)
        return not self.mu.has_mass(self.hi, iv.hi)

    def _locate(self, x, extrapolate):
        x = _as_array(x)
        below = x < self.lo
        above = x > self.hi
        if extrapolate == "exact":
            if np.any(below) and not self._continuation_ok("lo"):
                raise OutOfRangeError("point left of the solved range with mass beyond it",
                                      field="x", lo=float(self.lo))
            if np.any(above) and not self._continuation_ok("hi"):
                raise OutOfRangeError("point right of the solved range with mass beyond it",
                                      field="x", hi=float(self.hi))
        elif extrapolate == "never":
            if np.any(below | above):
                raise OutOfRangeError("point outside the solved range", field="x")
        return x, below, above

    def __call__(self, x, extrapolate="exact"):
        x, below, above = self._locate(x, extrapolate)
        sx = self.scale(x)
        if self.mesh.size == 1:
            return self.g[0] + self.p_plus[0] * (sx - self.s[0])
        i = np.clip(np.searchsorted(self.mesh, x, side="right") - 1, 0, self.mesh.size - 2)
        out = _hermite(sx, self.s[i], self.s[i + 1], self.g[i], self.g[i + 1],
                       self.p_plus[i], self.p_minus[i + 1])
        # nodes are returned exactly
        j = np.clip(np.searchsorted(self.mesh, x), 0, self.mesh.size - 1)
        at = self.mesh[j] == x
        out = np.where(at, self.g[j], out)
        out = np.where(below, self.g[0] + self.p_minus[0] * (sx - self.s[0]), out)
        out = np.where(above, self.g[-1] + self.p_plus[-1] * (sx - self.s[-1]), out)
        return out if out.ndim else float(out)

    def derivative(self, x, side="left", extrapolate="exact"):
        """One-sided derivative with respect to s."""
        x, below, above = self._locate(x, extrapolate)
        sx = self.scale(x)
        if self.mesh.size == 1:
            return np.full_like(sx, self.p_plus[0] if side == "right" else self.p_minus[0])
        i = np.clip(np.searchsorted(self.mesh, x, side="right") - 1, 0, self.mesh.size - 2)
        out = _hermite(sx, self.s[i], self.s[i + 1], self.g[i], self.g[i + 1],
                       self.p_plus[i], self.p_minus[i + 1], deriv=True)
        j = np.clip(np.searchsorted(self.mesh, x), 0, self.mesh.size - 1)
        at = self.mesh[j] == x
        node = self.p_minus[j] if side == "left" else self.p_plus[j]
        out = np.where(at, node, out)
        out = np.where(below, self.p_minus[0], out)
        out = np.where(above, self.p_plus[-1], out)
        return out if out.ndim else float(out)

    def reflected(self):
        """The solution of the reflected problem (x -> -x)."""
        spec = self.spec.reflected() if self.spec is not None else None
        mu = self.mu.reflected() if self.mu is not None else None
        return PairSolution(-self.mesh[::-1], -self.s[::-1], self.g[::-1], -self.p_plus[::-1],
                            -self.p_minus[::-1], -self.kappa,
                            "decreasing" if self.direction == "increasing" else "increasing",
                            -self.c, self.a, spec, mu, dict(self.info), self.mu_fingerprint)

    def with_values(self, g=None, p_minus=None, p_plus=None):
        return PairSolution(self.mesh, self.s, self.g if g is None else g,
                            self.p_minus if p_minus is None else p_minus,
                            self.p_plus if p_plus is None else p_plus, self.kappa, self.direction,
                            self.c, self.a, self.spec, self.mu, self.info, self.mu_fingerprint)

    # checks ----------------------------------------------------------------
    def check_invariants(self, rtol=1e-9):
        scale = max(1.0, float(np.max(np.abs(self.g))))
        if np.any(self.g[1:-1] <= 0) or np.any(self.g < -rtol * scale):
            raise NotItoWatanabePairError("not an Ito-Watanabe pair: solution is not positive")
        d = np.diff(self.g)
        if self.direction == "increasing" and np.any(d < -rtol * scale):
            raise NotItoWatanabePairError("increasing solution is not monotone")
        if self.direction == "decreasing" and np.any(d > rtol * scale):
            raise NotItoWatanabePairError("decreasing solution is not monotone")
        return True

    # serialisation ---------------------------------------------------------
    def to_json(self):
        return {"kind": "PairSolution", "mesh": self.mesh.tolist(), "s": self.s.tolist(),
                "g": self.g.tolist(), "p_minus": self.p_minus.tolist(),
                "p_plus": self.p_plus.tolist(), "kappa": self.kappa, "direction": self.direction,
                "c": self.c, "a": self.a, "mu_fingerprint": self.mu_fingerprint,
                "info": _jsonable(self.info)}

    @classmethod
    def from_json(cls, d):
        if d.get("kind", "PairSolution") != "PairSolution":
            raise ValidationError("not a PairSolution document", field="kind")
        for key in ("mesh", "g", "p_minus", "p_plus", "kappa", "direction", "c", "a"):
            if key not in d:
                raise ValidationError(f"missing field {key}", field=key)
        mesh = np.asarray(d["mesh"], dtype=float)
        s = np.asarray(d.get("s", mesh), dtype=float)
        return cls(mesh, s, d["g"], d["p_minus"], d["p_plus"], d["kappa"], d["direction"],
                   d["c"], d["a"], info=d.get("info"), mu_fingerprint=d.get("mu_fingerprint"))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "s", "g", "p_minus", "p_plus"])
        for row in zip(self.mesh, self.s, self.g, self.p_minus, self.p_plus):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else _ext_json(v) if not np.isnan(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


@dataclass
class Trajectory:
    """Raw march output. True values are stored values times exp(log_scale)."""

    mesh: np.ndarray
    s: np.ndarray
    g: np.ndarray
    p_minus: np.ndarray
    p_plus: np.ndarray
    log_scale: np.ndarray

    def values(self):
        f = np.exp(self.log_scale)
        return self.g * f, self.p_minus * f, self.p_plus * f


# --------------------------------------------------------------------------
# mesh and march


def _graded(d0, d1, step, ell, buffer):
    """Distances in [d0, d1] from a window edge: spacing step up to `buffer`,
    then step * (1 + (d - buffer) / ell)."""
    out = []
    if d0 < buffer:
        e = min(d1, buffer)
        n = max(1, int(math.ceil((e - d0) / step)))
        out.append(np.linspace(d0, e, n + 1))
        d0 = e
    if d1 > d0:
        r0, r1 = d0 - buffer + ell, d1 - buffer + ell
        n = max(1, int(math.ceil(ell / step * math.log(r1 / r0))))
        out.append(r0 * (r1 / r0) ** np.linspace(0.0, 1.0, n + 1) - ell + buffer)
    return np.unique(np.concatenate(out))


def build_mesh(spec, mu, lo, hi, step=1e-3, extra=(), dx_max=1e-3, graded_lo=False,
               max_nodes=4_000_000, window=None, ell=1.0, buffer=1.0):
    """Nodes on [lo, hi]: required points plus an s-uniform fill where the
    density may charge, with an additional cap dx_max on x-gaps.

    Outside `window` (an x-range) the fill coarsens linearly with the
    s-distance to the window beyond a buffer; used for truncation segments,
    whose errors only feed the mode that decays towards the window.
    """
    lo, hi = float(lo), float(hi)
    req = [lo, hi]
    if window is not None:
        req += [w for w in window if lo < w < hi]
    xa, _ = mu.atoms_in(lo, hi, closed="both")
    req += xa.tolist()
    req += [b for b in mu.breakpoints if lo < b < hi]
    if mu.support is not None:
        req += [b for b in mu.support if lo < b < hi]
    ex = _as_array(extra).ravel()
    req += ex[(ex >= lo) & (ex <= hi)].tolist()
    req = np.unique(np.asarray(req, dtype=float))
    s = spec.scale
    sreq = s(req)
    pieces = [req[:1]]
    count = 1
    for k in range(req.size - 1):
        a, b = req[k], req[k + 1]
        if mu.density_may_charge(a, b):
            side = None
            if window is not None:
                side = "lo" if b <= window[0] else ("hi" if a >= window[1] else None)
            if side is None:
                n = max(1, int(math.ceil((sreq[k + 1] - sreq[k]) / step)))
                u = np.linspace(sreq[k], sreq[k + 1], n + 1)[1:-1]
            else:
                edge = float(s(np.array([window[0] if side == "lo" else window[1]]))[0])
                d0, d1 = sorted(abs(edge - v) for v in (sreq[k], sreq[k + 1]))
                dd = _graded(d0, d1, step, ell, buffer)[1:-1]
                u = np.sort(edge - dd if side == "lo" else edge + dd)
                n = u.size + 1
            if count + n > max_nodes:
                raise TruncationError("mesh too large", nodes=count + n)
            if n > 1:
                xs = np.clip(s.inverse(u), a, b)
                seg = np.unique(np.concatenate([[a], xs, [b]]))
            else:
                seg = np.array([a, b])
            gaps = np.diff(seg)
            cap = np.full(gaps.size, dx_max)
            if side is not None:
                dmid = np.abs(edge - s(0.5 * (seg[1:] + seg[:-1])))
                cap = dx_max * (1.0 + np.maximum(dmid - buffer, 0.0) / ell)
            if np.any(gaps > cap):
                fill = [seg[:1]]
                for j in range(gaps.size):
                    m = int(math.ceil(gaps[j] / cap[j]))
                    fill.append(np.linspace(seg[j], seg[j + 1], m + 1)[1:])
                seg = np.concatenate(fill)
                if count + seg.size > max_nodes:
                    raise TruncationError("mesh too large", nodes=count + seg.size)
            pieces.append(seg[1:])
            count += seg.size - 1
        else:
            pieces.append(np.array([b]))
            count += 1
    mesh = np.concatenate(pieces)
    if graded_lo and mesh.size > 1 and mu.density_may_charge(mesh[0], mesh[1]):
        d = mesh[1] - mesh[0]
        mesh = np.unique(np.concatenate([mesh, mesh[0] + d * 2.0 ** -np.arange(1, 41)]))
    mesh = np.unique(mesh)
    return mesh


def cell_moments(spec, mu, mesh, smesh):
    """(a0, a1, c0, c1) weight moments of the density part over each mesh cell
    (see _march for their definition)."""
    n = mesh.size - 1
    a0, a1, c0, c1 = (np.zeros(n) for _ in range(4))
    if mu.density is None or n == 0:
        return a0, a1, c0, c1
    if mu.support is None:
        idx = np.arange(n)
    else:
        idx = np.nonzero((mesh[1:] > mu.support[0]) & (mesh[:-1] < mu.support[1]))[0]
    if idx.size == 0:
        return a0, a1, c0, c1
    x0, x1 = mesh[idx], mesh[idx + 1]
    s0, s1 = smesh[idx], smesh[idx + 1]
    mid = 0.5 * (x0 + x1)
    half = 0.5 * (x1 - x0)
    y = mid[:, None] + half[:, None] * _GX4[None, :]
    sy = spec.scale(y.ravel()).reshape(y.shape)
    rho = mu.density_at(y.ravel()).reshape(y.shape)
    ds = (s1 - s0)[:, None]
    w = half[:, None] * _GW4[None, :] * rho
    left = s1[:, None] - sy
    right = sy - s0[:, None]
    a0[idx] = np.sum(w * left / ds, axis=1)
    a1[idx] = np.sum(w * right / ds, axis=1)
    c0[idx] = np.sum(w * left * left / ds, axis=1)
    c1[idx] = np.sum(w * left * right / ds, axis=1)
    return a0, a1, c0, c1


def _atom_jumps(mu, mesh):
    jump = np.zeros(mesh.size)
    xa, wa = mu.atoms_in(mesh[0], mesh[-1], closed="both")
    if xa.size:
        j = np.searchsorted(mesh, xa)
        if np.any(mesh[np.clip(j, 0, mesh.size - 1)] != xa):
            raise ValidationError("atoms must be mesh nodes")
        jump[j] = wa
    return jump


def _march_mesh(spec, mu, mesh, g0, p0):
    smesh = spec.scale(mesh)
    ds = np.diff(smesh)
    if np.any(~np.isfinite(smesh)) or np.any(ds <= 0):
        raise ScaleDegenerateError("scale degenerate: s increments vanish on the mesh")
    a0, a1, c0, c1 = cell_moments(spec, mu, mesh, smesh)
    jump = _atom_jumps(mu, mesh)
    g, pm, pp, shift, bad = run_march(ds, a0, a1, c0, c1, jump, g0, p0)
    if bad:
        raise ScaleDegenerateError("mesh too coarse for the measure (implicit step singular)",
                                   cell=bad)
    return Trajectory(mesh, smesh, g, pm, pp, shift)


def march_measure_ode(spec, mu, x0, g0, p0, x1, step=1e-3, points=(), dx_max=1e-3):
    """March dg = p ds, dp = g dmu from x0 to x1.

    p0 is the s-derivative on the side facing the march (right derivative when
    x1 > x0, left derivative when x1 < x0). Returns a Trajectory on an
    increasing mesh.
    """
    iv = spec.interval
    for name, v in (("x0", x0), ("x1", x1)):
        if not iv.lo <= v <= iv.hi or not np.isfinite(v):
            raise ValidationError(f"{name} must lie in the interval", field=name)
    if x1 == x0:
        raise ValidationError("x1 must differ from x0", field="x1")
    if x1 > x0:
        mesh = build_mesh(spec, mu, x0, x1, step, extra=points, dx_max=dx_max)
        return _march_mesh(spec, mu, mesh, g0, p0)
    rs, rm = spec.reflected(), mu.reflected()
    mesh = build_mesh(rs, rm, -x0, -x1, step, extra=-_as_array(points), dx_max=dx_max)
    t = _march_mesh(rs, rm, mesh, g0, -p0)
    return Trajectory(-t.mesh[::-1], -t.s[::-1], t.g[::-1], -t.p_plus[::-1], -t.p_minus[::-1],
                      t.log_scale[::-1])


def _normalised(traj, c, a):
    ic = int(np.searchsorted(traj.mesh, c))
    if ic >= traj.mesh.size or traj.mesh[ic] != c:
        raise ValidationError("anchor must be a mesh node")
    factor = a * np.exp(traj.log_scale - traj.log_scale[ic]) / traj.g[ic]
    return traj.g * factor, traj.p_minus * factor, traj.p_plus * factor


# --------------------------------------------------------------------------
# solvers


def _points_of_interest(problem, query):
    spec, mu = problem.spec, problem.mu
    iv = spec.interval
    pts = [problem.c]
    if query is not None:
        q = _as_array(query).ravel()
        iv.check_interior(q, "query")
        pts += q.tolist()
    else:
        cand = list(mu.atom_x)
        if mu.support is not None:
            cand += [v for v in mu.support if np.isfinite(v)]
        if not cand:
            cand = [problem.c - 1.0, problem.c + 1.0]
        pts += [v for v in cand if iv.lo < v < iv.hi]
    return np.unique(np.asarray(pts, dtype=float))


def solve_increasing(problem: PairProblem, step=1e-3, query=None, tol=1e-8, ratio=2.0,
                     n_max=40, dx_max=1e-3, n_probe=33, max_nodes=4_000_000):
    """The increasing solution g_r with g_r(c) = a."""
    if problem.direction != "increasing":
        raise ValidationError("solve_increasing needs direction='increasing'", field="direction")
    if not ratio > 1:
        raise ValidationError("truncation ratio must exceed 1", field="ratio")
    spec, mu, c, a = problem.spec, problem.mu, problem.c, problem.a
    iv = spec.interval
    s = spec.scale
    poi = _points_of_interest(problem, query)
    p_min, hi_x = float(poi[0]), float(poi[-1])
    probes = np.unique(np.concatenate([poi, np.linspace(p_min, hi_x, n_probe)]))
    verdict = classify_boundaries(spec, mu).lo_verdict
    s_lo = spec.s_lo
    info = {"method": "march", "step": step}

    if np.isfinite(s_lo) and verdict == "finite" and np.isfinite(iv.lo):
        mesh = build_mesh(spec, mu, iv.lo, hi_x, step, extra=probes, dx_max=dx_max,
                          graded_lo=True, max_nodes=max_nodes)
        traj = _march_mesh(spec, mu, mesh, 0.0, 1.0)
        g, pm, pp = _normalised(traj, c, a)
        g[0] = 0.0
        kappa = pp[0]
        info["regime"] = "exact-start"
    else:
        if np.isfinite(s_lo) and verdict == "finite":
            data = lambda xn: (float(s(np.array([xn]))[0]) - s_lo, 1.0)
            regime = "finite-scale"
        elif np.isfinite(s_lo):
            data = lambda xn: (0.0, 1.0)
            regime = "caf-divergent"
        else:
            data = lambda xn: (1.0, 0.0)
            regime = "infinite-scale"
        info["regime"] = regime
        if np.isfinite(iv.lo):
            lows = [iv.lo + (p_min - iv.lo) * ratio ** -(n + 1) for n in range(n_max + 1)]
        else:
            anchor = p_min
            xa = mu.atom_x
            if xa.size:
                anchor = min(anchor, float(xa[0]))
            if mu.support is not None and np.isfinite(mu.support[0]):
                anchor = min(anchor, mu.support[0])
            L0 = max(1.0, hi_x - p_min)
            lows = [anchor - L0 * ratio ** n for n in range(n_max + 1)]
        prev = None
        history = []
        for n, ln in enumerate(lows):
            mesh = build_mesh(spec, mu, ln, hi_x, step, extra=probes, dx_max=dx_max,
                              max_nodes=max_nodes, window=(p_min, hi_x))
            g0, p0 = data(ln)
            traj = _march_mesh(spec, mu, mesh, g0, p0)
            g, pm, pp = _normalised(traj, c, a)
            idx = np.searchsorted(mesh, probes)
            vals = g[idx]
            if prev is not None:
                denom = np.maximum(np.abs(vals), 1e-300)
                diff = float(np.max(np.abs(vals - prev) / denom))
                history.append(diff)
                if diff < tol:
                    break
            prev = vals
        else:
            raise TruncationError("truncation did not converge", history=history,
                                  last=prev.tolist() if prev is not None else None)
        info["truncation"] = {"levels": n + 1, "lo": ln, "history": history, "ratio": ratio}
        kappa = pp[0] if regime == "finite-scale" else 0.0
    if problem.kappa is not None and abs(problem.kappa - kappa) > 1e-6 * (1 + abs(kappa)):
        raise ValidationError("forced kappa contradicts the boundary regime", field="kappa",
                              computed=kappa)
    sol = PairSolution(mesh, spec.scale(mesh), g, pm, pp, kappa, "increasing", c, a,
                       spec, mu, info)
    sol.check_invariants()
    return sol


def solve_decreasing(problem: PairProblem, **kw):
    """The decreasing solution g_l with g_l(c) = a (mirror of solve_increasing)."""
    if problem.direction != "decreasing":
        raise ValidationError("solve_decreasing needs direction='decreasing'", field="direction")
    q = kw.pop("query", None)
    rq = None if q is None else -_as_array(q)
    return _restore(solve_increasing(problem.reflected(), query=rq, **kw).reflected(), problem)


def _restore(sol, problem):
    # reflect twice gives equivalent but distinct objects; keep the caller's
    sol.spec, sol.mu = problem.spec, problem.mu
    sol.mu_fingerprint = problem.mu.fingerprint
    return sol


def solve(problem: PairProblem, **kw):
    if problem.direction == "increasing":
        return solve_increasing(problem, **kw)
    return solve_decreasing(problem, **kw)


# --------------------------------------------------------------------------
# killed-kernel route


def _bary_weights(n):
    t, _ = leggauss(n)
    w = np.ones(n)
    for j in range(n):
        w[j] = 1.0 / np.prod(t[j] - np.delete(t, j))
    return t, w


def _lagrange_matrix(z, t, bw):
    """L[k, j] = l_j(z_k) for nodes t (reference coordinates)."""
    diff = z[:, None] - t[None, :]
    exact = diff == 0
    diff = np.where(exact, 1.0, diff)
    tmp = bw[None, :] / diff
    L = tmp / tmp.sum(axis=1, keepdims=True)
    rows = exact.any(axis=1)
    if rows.any():
        L[rows] = exact[rows].astype(float)
    return L


def solve_via_killed_kernel(problem: PairProblem, query=None, panel=0.125, order=16,
                            tol=1e-13, max_iter=5000, method="picard"):
    """Nystrom discretisation of the killed-kernel form, solved by Picard iteration.

    Needs a finite left end point with finite scale (mirrored for decreasing).
    """
    if problem.direction == "decreasing":
        q = None if query is None else -_as_array(query)
        return _restore(solve_via_killed_kernel(problem.reflected(), q, panel, order, tol,
                                                max_iter, method).reflected(), problem)
    spec, mu, c, a = problem.spec, problem.mu, problem.c, problem.a
    iv = spec.interval
    if not (np.isfinite(iv.lo) and np.isfinite(spec.s_lo)):
        raise ValidationError("killed-kernel route needs a finite boundary with finite scale",
                              field="interval")
    s = spec.scale
    lo = iv.lo
    sl = spec.s_lo
    sc = float(s(np.array([c]))[0])
    S = sc - sl
    poi = _points_of_interest(problem, query)
    hi_x = float(poi[-1])

    brk = [lo, c, hi_x] + mu.atoms_in(lo, hi_x, "both")[0].tolist()
    brk += [b for b in mu.breakpoints if lo < b < hi_x]
    if mu.support is not None:
        brk += [b for b in mu.support if lo < b < hi_x]
    brk = np.unique(np.asarray(brk, dtype=float))
    edges = [brk[:1]]
    for k in range(brk.size - 1):
        n = max(1, int(math.ceil((brk[k + 1] - brk[k]) / panel)))
        edges.append(np.linspace(brk[k], brk[k + 1], n + 1)[1:])
    edges = np.concatenate(edges)
    d = edges[1] - edges[0]
    edges = np.unique(np.concatenate([edges, lo + d * 2.0 ** -np.arange(1, 31)]))
    plo, phi = edges[:-1], edges[1:]
    if mu.density is not None:
        keep = np.array([mu.density_may_charge(u, v) for u, v in zip(plo, phi)])
        plo, phi = plo[keep], phi[keep]
    else:
        plo, phi = plo[:0], phi[:0]

    t, bw = _bary_weights(order)
    _, wq = leggauss(order)
    zq, wz = leggauss(order + 8)
    mid = 0.5 * (plo + phi)
    half = 0.5 * (phi - plo)
    yd = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    wd = (half[:, None] * wq[None, :]).ravel() * mu.density_at(yd) if yd.size else yd
    xa, ma = mu.atoms_in(lo, hi_x, "right")
    y = np.concatenate([yd, xa])
    wmu = np.concatenate([wd, ma])
    sy = s(y)
    npan = plo.size

    def kernel(x, sx, yy, syy):
        # increasing kernel: -u(c; x, y) for y <= c, s(x v y) - s(y) for y > c
        smin = np.minimum(sx, syy)
        smax = np.maximum(sx, syy)
        left = -(smin - sl) * (sc - smax) / S
        right = np.where(yy < x, sx - syy, 0.0)
        return np.where(yy <= c, left, right)

    def rows(xs, cumulative=False):
        """Nystrom rows: integral operator (or cumulative mass if `cumulative`)."""
        xs = _as_array(xs)
        sxs = s(xs)
        R = np.zeros((xs.size, y.size))
        for k in range(xs.size):
            x, sx = xs[k], sxs[k]
            if cumulative:
                R[k] = np.where(y <= x, wmu, 0.0)
            else:
                R[k] = kernel(x, sx, y, sy) * wmu
            if npan:
                p = np.searchsorted(phi, x)
                if p < npan and plo[p] < x < phi[p]:
                    sl_ = slice(p * order, (p + 1) * order)
                    tau = (x - mid[p]) / half[p]
                    acc = np.zeros(order)
                    parts = [(-1.0, tau)] if cumulative else [(-1.0, tau), (tau, 1.0)]
                    for u0, u1 in parts:
                        zz = 0.5 * (u0 + u1) + 0.5 * (u1 - u0) * zq
                        ww = 0.5 * (u1 - u0) * wz
                        L = _lagrange_matrix(zz, t, bw)
                        yy = mid[p] + half[p] * zz
                        f = mu.density_at(yy) * half[p] * ww
                        if not cumulative:
                            f = f * kernel(x, sx, yy, s(yy))
                        acc += f @ L
                    R[k, sl_] = acc
        return R

    M = rows(y)
    f = a * (sy - sl) / S
    g = f.copy()
    history = []
    if method == "direct":
        g = np.linalg.solve(np.eye(y.size) - M, f)
        iters = 0
    else:
        iters = 0
        for iters in range(1, max_iter + 1):
            gn = f + M @ g
            delta = float(np.max(np.abs(gn - g))) if g.size else 0.0
            scale = max(1e-300, float(np.max(np.abs(gn)))) if g.size else 1.0
            history.append(delta / scale)
            g = gn
            if delta <= tol * scale:
                break
            if not np.isfinite(delta) or (len(history) > 30 and history[-1] > 10 * history[-30]
                                          and history[-1] > 1e-3):
                raise KernelIterationError("Picard iteration diverged", history=history[-20:])
        else:
            raise KernelIterationError("Picard iteration did not converge", history=history[-20:])

    # evaluation mesh
    mesh = np.unique(np.concatenate([[lo], edges[edges <= hi_x], poi, y]))
    mesh = mesh[(mesh >= lo) & (mesh <= hi_x)]
    inner = mesh[1:]
    gm = np.concatenate([[0.0], a * (s(inner) - sl) / S + rows(inner) @ g])
    ic = int(np.searchsorted(mesh, c))
    gm[ic] = a
    w_c = np.where(y <= c, (sc - sy) / S, 0.0) * wmu
    kappa = a / S - float(w_c @ g)
    cum = np.concatenate([np.zeros((1, y.size)), rows(inner, cumulative=True)])
    pp = kappa + cum @ g
    jump = _atom_jumps(mu, mesh)
    pm = pp - jump * gm
    info = {"method": "killed-kernel", "iterations": iters, "panel": panel, "order": order,
            "history": history[-5:]}
    sol = PairSolution(mesh, s(mesh), gm, pm, pp, kappa, "increasing", c, a, spec, mu, info)
    sol.check_invariants()
    return sol


# --------------------------------------------------------------------------
# verification


def _moment_table(gfun, spec, mu, nodes, tol=1e-12):
    """Cumulative int_(nodes[0], t] g dmu and int_(nodes[0], t] s g dmu at each node."""
    nodes = np.unique(_as_array(nodes))
    s = spec.scale
    n = nodes.size
    c0 = np.zeros(n)
    c1 = np.zeros(n)
    if mu.density is not None and n > 1:
        def f0(yv):
            return gfun(yv) * mu.density_at(yv)

        def f1(yv):
            return s(yv) * gfun(yv) * mu.density_at(yv)
        _, p0 = adaptive_gauss(f0, nodes[0], nodes[-1], tol=tol, points=nodes[1:-1],
                               return_panels=True)
        _, p1 = adaptive_gauss(f1, nodes[0], nodes[-1], tol=tol, points=nodes[1:-1],
                               return_panels=True)
        c0[1:] = np.cumsum(p0)
        c1[1:] = np.cumsum(p1)
    xa, wa = mu.atoms_in(nodes[0], nodes[-1], "right")
    if xa.size:
        ga = _as_array(gfun(xa)) * wa
        j = np.searchsorted(nodes, xa)
        for jj, v, sv in zip(j, ga, s(xa)):
            c0[jj:] += v
            c1[jj:] += sv * v
    return nodes, c0, c1


def residual(sol: PairSolution, probes, tol=1e-12, return_all=False):
    """max |g(x) - a - kappa (s(x) - s(c)) - int v_c(x, y) g(y) mu(dy)| over probes."""
    if sol.spec is None or sol.mu is None:
        raise ValidationError("residual needs a solution carrying its diffusion and measure")
    if sol.direction == "decreasing":
        return residual(sol.reflected(), -_as_array(probes), tol, return_all)
    probes = _as_array(probes).ravel()
    if np.any(probes < sol.lo) or np.any(probes > sol.hi):
        raise OutOfRangeError("probes must lie in the solved range", field="probes")
    s = sol.spec.scale
    nodes = np.concatenate([sol.mesh, probes, [sol.c]])
    gfun = lambda yv: sol(yv, extrapolate="never")
    nodes, c0, c1 = _moment_table(gfun, sol.spec, sol.mu, nodes, tol)
    ix = np.searchsorted(nodes, probes)
    icc = int(np.searchsorted(nodes, sol.c))
    sx = s(probes)
    sc = float(s(np.array([sol.c]))[0])
    integral = sx * c0[ix] - c1[ix] - sc * c0[icc] + c1[icc]
    tail = (sx - sc) * (sol.p_plus[0] - sol.kappa)
    r = sol(probes) - sol.a - sol.kappa * (sx - sc) - tail - integral
    if return_all:
        return r
    return float(np.max(np.abs(r)))


def exit_expectation_check(g, a, x, b, tol=1e-12):
    """(lhs, rhs) of E^x g(X_T) = g(x) + int u_ab(x, y) g(y) mu(dy).

    `g` is a PairSolution or GeneralSolution; a, x, b may be arrays of triples.
    """
    a, x, b = np.broadcast_arrays(_as_array(a), _as_array(x), _as_array(b))
    if np.any(~((a < x) & (x < b))):
        raise ValidationError("exit identity needs a < x < b", field="x")
    spec, mu = g.spec, g.mu
    s = spec.scale
    mesh = g.mesh
    lo, hi = float(np.min(a)), float(np.max(b))
    inner = mesh[(mesh > lo) & (mesh < hi)]
    nodes = np.concatenate([inner, a.ravel(), x.ravel(), b.ravel()])
    nodes, c0, c1 = _moment_table(lambda yv: g(yv), spec, mu, nodes, tol)
    ia, ix, ib = (np.searchsorted(nodes, v) for v in (a, x, b))
    sa, sx, sb = s(a), s(x), s(b)
    D = sb - sa
    lhs = g(a) * (sb - sx) / D + g(b) * (sx - sa) / D
    left = (c1[ix] - c1[ia]) - sa * (c0[ix] - c0[ia])
    right = sb * (c0[ib] - c0[ix]) - (c1[ib] - c1[ix])
    rhs = g(x) + ((sb - sx) * left + (sx - sa) * right) / D
    if lhs.ndim == 0:
        return float(lhs), float(rhs)
    return lhs, rhs


def kappa_from_boundary_identity(sol: PairSolution, b, tol=1e-12):
    """kappa recovered from the boundary-slope identity at probe point(s) b."""
    if sol.direction == "decreasing":
        k = kappa_from_boundary_identity(sol.reflected(), -_as_array(b), tol)
        return -k
    spec, mu = sol.spec, sol.mu
    if spec is None or mu is None:
        raise ValidationError("identity needs a solution carrying its diffusion and measure")
    sl = spec.s_lo
    if not np.isfinite(sl):
        raise ValidationError("boundary identity needs a finite scale limit", field="sol")
    iv = spec.interval
    at_boundary = np.isfinite(iv.lo) and sol.lo == iv.lo
    if not at_boundary:
        if classify_boundaries(spec, mu).lo_verdict == "infinite":
            raise KappaZeroRegime("kappa = 0 regime: the functional diverges at the boundary")
        g_l = sol.g[0] - sol.p_minus[0] * (sol.s[0] - sl)
    else:
        g_l = sol.g[0]
    b = _as_array(b)
    bb = b.ravel()
    s = spec.scale
    nodes, c0, c1 = _moment_table(lambda yv: sol(yv), spec, mu, np.concatenate([sol.mesh, bb]), tol)
    ib = np.searchsorted(nodes, bb)
    sb = s(bb)
    # mass below the mesh start (only in the unbounded finite-scale case)
    below0 = sol.p_plus[0] - sol.kappa if not at_boundary else 0.0
    integral = (sb * c0[ib] - c1[ib]) / (sb - sl)
    if not at_boundary:
        integral = integral + below0 * (sb - sol.s[0]) / (sb - sl)
    k = (sol(bb) - g_l) / (sb - sl) - integral
    return float(k[0]) if b.ndim == 0 else k.reshape(b.shape)


# --------------------------------------------------------------------------
# combinations


class GeneralSolution:
    """g = lambda1 g_r + lambda2 g_l."""

    def __init__(self, lambda1, lambda2, gr, gl):
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)
        self.gr = gr
        self.gl = gl
        parts = self.parts
        self.spec = parts[0][1].spec
        self.mu = parts[0][1].mu
        self.c = gr.c if self.lambda1 > 0 else gl.c
        mesh = np.unique(np.concatenate([p.mesh for _, p in parts]))
        ok = np.ones(mesh.size, dtype=bool)
        for _, p in parts:
            if not p._continuation_ok("lo"):
                ok &= mesh >= p.lo
            if not p._continuation_ok("hi"):
                ok &= mesh <= p.hi
        self.mesh = mesh[ok]
        if self.mesh.size < 2:
            raise ValidationError("g_r and g_l meshes do not overlap")
        self.s = self.spec.scale(self.mesh) if self.spec is not None else None
        self.g = self(self.mesh)
        self.p_minus = self.derivative(self.mesh, "left")
        self.p_plus = self.derivative(self.mesh, "right")

    @property
    def parts(self):
        out = []
        if self.lambda1 > 0:
            out.append((self.lambda1, self.gr))
        if self.lambda2 > 0:
            out.append((self.lambda2, self.gl))
        return out

    @property
    def lo(self):
        return self.mesh[0]

    @property
    def hi(self):
        return self.mesh[-1]

    def scale(self, x):
        return self.spec.scale(x)

    def __call__(self, x, extrapolate="exact"):
        return sum(lam * p(x, extrapolate=extrapolate) for lam, p in self.parts)

    def derivative(self, x, side="left", extrapolate="exact"):
        return sum(lam * p.derivative(x, side, extrapolate) for lam, p in self.parts)

    def check_invariants(self, rtol=1e-9):
        if np.any(self.g <= 0):
            raise NotItoWatanabePairError("combined g is not strictly positive")
        scale = max(1.0, float(np.max(np.abs(self.p_plus))))
        if np.any(np.diff(self.p_plus) < -rtol * scale):
            raise NotItoWatanabePairError("combined g is not s-convex")
        return True

    def to_json(self):
        return {"kind": "GeneralSolution", "lambda1": self.lambda1, "lambda2": self.lambda2,
                "gr": self.gr.to_json(), "gl": self.gl.to_json()}


def combine(lambda1, lambda2, gr: PairSolution, gl: PairSolution) -> GeneralSolution:
    l1, l2 = float(lambda1), float(lambda2)
    if l1 < 0 or l2 < 0 or not l1 + l2 > 0:
        raise ValidationError("need lambda1, lambda2 >= 0, not both zero", field="lambda")
    if gr.direction != "increasing" or gl.direction != "decreasing":
        raise ValidationError("combine expects (increasing, decreasing) solutions")
    if gr.mu_fingerprint != gl.mu_fingerprint:
        raise ValidationError("g_r and g_l were solved for different measures",
                              field="mu_fingerprint")
    return GeneralSolution(l1, l2, gr, gl)


def fit_decomposition(sample_a, sample_b, gr, gl):
    """(lambda1, lambda2) with lambda1 g_r + lambda2 g_l through two samples."""
    (a0, ga), (b0, gb) = sample_a, sample_b
    if not a0 < b0:
        raise ValidationError("samples need a0 < b0", field="samples")
    M = np.array([[gr(a0), gl(a0)], [gr(b0), gl(b0)]], dtype=float)
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if abs(det) <= 1e-12 * (abs(M[0, 0] * M[1, 1]) + abs(M[0, 1] * M[1, 0])):
        raise SingularDecompositionError("g_r, g_l not independent at probes")
    lam = np.linalg.solve(M, np.array([ga, gb], dtype=float))
    return float(lam[0]), float(lam[1])

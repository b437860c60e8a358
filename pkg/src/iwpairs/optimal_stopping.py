"""Perpetual optimal stopping under the discount exp(-A_t).

V(x) = sup E^x[exp(-A_tau) f(X_tau); tau < zeta] is computed as g(x) G(s_g(x))
where g = lambda1 g_r + lambda2 g_l and G is the smallest concave majorant of
F = f/g written in the s_g coordinate.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .diffusion_core import DiffusionSpec, RadonMeasure, _as_array, _broadcast, _ext_json
from .errors import NumericalError, ValidationError
from .ie_solver import PairProblem, combine, solve_decreasing, solve_increasing
from .transform import TransformedDiffusion


@dataclass
class RewardSpec:
    """Reward f and the limits of f/g at the two boundaries ("auto" to extrapolate)."""

    f: Callable
    limits: Union[str, Sequence[float]] = "auto"
    description: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.limits, str):
            if self.limits != "auto":
                raise ValidationError("limits must be 'auto' or a pair of numbers",
                                      field="reward.limits")
        else:
            lim = tuple(float(v) for v in self.limits)
            if len(lim) != 2 or not all(np.isfinite(lim)):
                raise ValidationError("declared limits must be two finite numbers",
                                      field="reward.limits")
            self.limits = lim

    def __call__(self, x):
        return _broadcast(self.f, x)


# --------------------------------------------------------------------------
# concave majorant


def _upper_hull(u, F):
    hull = []
    for i in range(u.size):
        while len(hull) >= 2:
            j, k = hull[-2], hull[-1]
            cross = (u[k] - u[j]) * (F[i] - F[j]) - (F[k] - F[j]) * (u[i] - u[j])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return np.array(hull, dtype=int)


@dataclass
class MajorantResult:
    u: np.ndarray
    F: np.ndarray
    G: np.ndarray
    knots: np.ndarray

    def __call__(self, v):
        k = self.knots
        return np.interp(_as_array(v), self.u[k], self.F[k])


def concave_majorant(u, F) -> MajorantResult:
    """Smallest concave majorant of the samples (u_i, F_i), evaluated at u_i."""
    u = _as_array(u).ravel()
    F = _as_array(F).ravel()
    if u.shape != F.shape or u.size == 0:
        raise ValidationError("u and F must be non-empty and of equal length", field="u")
    if not np.all(np.isfinite(u)) or not np.all(np.isfinite(F)):
        raise ValidationError("samples must be finite", field="F")
    order = np.argsort(u, kind="stable")
    u, F = u[order], F[order]
    if np.any(np.diff(u) == 0):
        # equal abscissae: keep the largest value
        keep = np.concatenate([np.diff(u) > 0, [True]])
        Fm = F.copy()
        for i in range(u.size - 2, -1, -1):
            if u[i] == u[i + 1]:
                Fm[i] = max(Fm[i], Fm[i + 1])
        u, F = u[keep], Fm[keep]
    knots = _upper_hull(u, F)
    G = np.interp(u, u[knots], F[knots])
    G = np.maximum(G, F)
    return MajorantResult(u, F, G, knots)


def brute_force_majorant(u, F):
    """O(n^3) chord maximum; used as a test oracle."""
    u = _as_array(u)
    F = _as_array(F)
    n = u.size
    G = F.copy()
    for i in range(n):
        best = F[i]
        for j in range(i + 1):
            for k in range(i, n):
                if u[k] == u[j]:
                    continue
                w = (u[i] - u[j]) / (u[k] - u[j])
                best = max(best, (1 - w) * F[j] + w * F[k])
        G[i] = best
    return G


# --------------------------------------------------------------------------
# boundary limits and finiteness


def _boundary_samples(td, side, n=22):
    """Points approaching the boundary in the s_g coordinate."""
    ul, ur = td.u_l, td.u_r
    w = ur - ul
    k = np.arange(6, 6 + n)
    if side == "lo":
        return ul + w * 2.0 ** -k
    return ur - w * 2.0 ** -k


def _F_of_u(reward, td, u):
    x = td.inverse(u)
    gx = td.g_of_x(x, extrapolate=True)
    return reward(x) / gx, x


def _limit_samples(reward, td, side, n=22):
    """f/g at points running out to the boundary; x-spaced toward an infinite end."""
    b = td.base.interval.lo if side == "lo" else td.base.interval.hi
    if np.isfinite(b):
        return _F_of_u(reward, td, _boundary_samples(td, side, n))[0]
    sgn = -1.0 if side == "lo" else 1.0
    if td.exact[side]:
        # no mass beyond the table: the affine tail of g is exact out to any x
        x = td.c + sgn * 2.0 ** np.arange(1, 1 + 2 * n)
    else:
        end = td.table.x[0] if side == "lo" else td.table.x[-1]
        x = td.c + np.linspace(0.5, 1.0, n) * (end - td.c)
    return reward(x) / td.g_of_x(x, extrapolate=True)


def _auto_limit(reward, td, side):
    F = _limit_samples(reward, td, side)
    if not np.all(np.isfinite(F)):
        raise ValidationError(f"f/g is not finite near the {side} boundary; declare limits",
                              field="reward.limits")
    d = np.diff(F)
    tail = d[-8:]
    if np.all(np.abs(tail) <= 1e-13 * (1 + abs(F[-1]))):
        return float(F[-1])
    ratios = np.abs(tail[1:]) / np.maximum(np.abs(tail[:-1]), 1e-300)
    if np.max(ratios) > 0.9:
        raise ValidationError(f"cannot extrapolate f/g at the {side} boundary; declare limits",
                              field="reward.limits", ratios=ratios.tolist())
    # Aitken extrapolation on successive triples; the estimates must settle
    f0, f1, f2 = F[:-2], F[1:-1], F[2:]
    den = f2 - 2 * f1 + f0
    safe = np.where(den != 0, den, 1.0)
    est = np.where(den != 0, f2 - (f2 - f1) ** 2 / safe, f2)
    last = est[-4:]
    if np.ptp(last) > 1e-8 * (1 + abs(last[-1])):
        raise ValidationError(f"f/g limit at the {side} boundary not converged", field="reward.limits",
                              estimates=last.tolist())
    return float(last[-1])


def _diverging(F):
    """Tail samples growing in size with non-decaying increments."""
    t = np.abs(F[-9:])
    d = np.diff(t)
    return bool(np.all(d > 0) and np.all(d[1:] >= 0.99 * d[:-1]))


def check_finiteness(reward, td, n=2048):
    """(finite, sup |f/g|) from samples across (u_l, u_r) and out to both ends."""
    ul, ur = td.u_l, td.u_r
    u = np.concatenate([np.linspace(ul, ur, n)[1:-1], _boundary_samples(td, "lo"),
                        _boundary_samples(td, "hi")])
    F, _ = _F_of_u(reward, td, np.sort(u))
    tails = [_limit_samples(reward, td, s) for s in ("lo", "hi")]
    allF = np.concatenate([F, *tails])
    if not np.all(np.isfinite(allF)):
        return False, math.inf
    m = float(np.max(np.abs(allF)))
    return not any(_diverging(t) for t in tails), m


# --------------------------------------------------------------------------
# solution


@dataclass
class StoppingSolution:
    td: TransformedDiffusion
    reward: RewardSpec
    majorant: MajorantResult
    limits: tuple
    region: list
    verdict: str
    lambdas: tuple
    info: dict = field(default_factory=dict)

    @property
    def g(self):
        return self.td.g

    def G(self, u):
        return self.majorant(u)

    def value(self, x):
        x = _as_array(x)
        gx = self.td.g_of_x(x, extrapolate=True)
        # between samples the chord lies below a concave F, so take the max
        G = np.maximum(self.majorant(self.td.s_g(x)), self.reward(x) / gx)
        out = gx * G
        return out if out.ndim else float(out)

    def to_json(self, grid=None):
        x = self._grid(grid)
        sg = self.td.s_g
        contact = [[_ext_json(float(sg(np.array([a]))[0]) if np.isfinite(a) else (self.td.u_l if a < 0 else self.td.u_r)),
                    _ext_json(float(sg(np.array([b]))[0]) if np.isfinite(b) else (self.td.u_l if b < 0 else self.td.u_r))]
                   for a, b in self.region]
        return {"kind": "StoppingSolution", "lambda1": self.lambdas[0], "lambda2": self.lambdas[1],
                "verdict": self.verdict, "optimal_flag": self.verdict == "optimal",
                "stopping_region": [[_ext_json(a), _ext_json(b)] for a, b in self.region],
                "contact_set": contact,
                "limits": list(self.limits), "u_l": _ext_json(self.td.u_l),
                "u_r": _ext_json(self.td.u_r),
                "knots": {"u": self.majorant.u[self.majorant.knots].tolist(),
                          "G": self.majorant.F[self.majorant.knots].tolist()},
                "V": {"x": x.tolist(), "V": np.asarray(self.value(x)).tolist()}}

    def to_csv(self, grid=None):
        x = self._grid(grid)
        V = self.value(x)
        f = self.reward(x)
        g = self.td.g_of_x(x, extrapolate=True)
        sg = self.td.s_g(x)
        ind = stopping_indicator(self, x)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "f", "g", "s_g", "V", "stop"])
        for row in zip(x, f, g, sg, V, ind):
            w.writerow([repr(float(v)) for v in row[:5]] + [int(row[5])])
        return buf.getvalue()

    def _grid(self, grid):
        if grid is not None:
            return _as_array(grid)
        c = self.td.c
        iv = self.td.base.interval
        lo = max(c - 5.0, iv.lo + 1e-6 if np.isfinite(iv.lo) else -np.inf)
        hi = min(c + 5.0, iv.hi - 1e-6 if np.isfinite(iv.hi) else np.inf)
        return np.linspace(lo, hi, 201)

    @property
    def optimal(self):
        return self.verdict == "optimal"


def value_at(sol: StoppingSolution, x):
    return sol.value(x)


def stopping_indicator(sol: StoppingSolution, x, eps=0.0):
    """True where f/g + eps >= G(s_g) up to the contact tolerance."""
    x = _as_array(x)
    gx = sol.td.g_of_x(x, extrapolate=True)
    F = sol.reward(x) / gx
    G = sol.majorant(sol.td.s_g(x))
    return F + eps >= _contact_level(G)


def _contact_level(G, rel=1e-7, abs_=0.0):
    return G - rel * np.abs(G) - abs_


def _contact_region(td, maj):
    u, F, G, k = maj.u, maj.F, maj.G, maj.knots
    contact = F >= _contact_level(G)
    contact[0] = contact[-1] = False  # boundary samples carry limits, not rewards
    knot_set = np.zeros(u.size, dtype=bool)
    knot_set[k] = True
    runs = []
    i = 1
    n = u.size
    while i < n - 1:
        if contact[i]:
            j = i
            while j + 1 < n - 1 and contact[j + 1]:
                j += 1
            kn = np.nonzero(knot_set[i:j + 1])[0]
            a, b = (i + kn[0], i + kn[-1]) if kn.size else (i, j)
            lo = u[a]
            hi = u[b]
            to_lo = i == 1
            to_hi = j == n - 2
            runs.append((lo, hi, to_lo, to_hi))
            i = j + 1
        else:
            i += 1
    region = []
    iv = td.base.interval
    for lo, hi, to_lo, to_hi in runs:
        xa = iv.lo if to_lo else float(td.inverse(np.array([lo]))[0])
        xb = iv.hi if to_hi else float(td.inverse(np.array([hi]))[0])
        region.append((xa, xb))
    return region, runs


def _u_grid(ul, ur, n):
    w = ur - ul
    base = np.linspace(ul, ur, n)
    # closer than ~1e-8 of the width the inverse map loses precision
    k = np.arange(1, 33) / 4.0
    geo = np.concatenate([ul + w * 10.0 ** -k, ur - w * 10.0 ** -k])
    u = np.unique(np.concatenate([base, geo]))
    return u[(u > ul) & (u < ur)]


def solve(spec: DiffusionSpec, mu: RadonMeasure, reward: RewardSpec, lambda1=0.5, lambda2=0.5,
          c=0.0, step=1e-3, window=4.0, n_grid=4096, refine_rounds=6, gr=None, gl=None,
          td=None) -> StoppingSolution:
    """Value function and stopping region via the concave-majorant reduction."""
    if not (lambda1 > 0 and lambda2 > 0):
        raise ValidationError("stopping needs lambda1 > 0 and lambda2 > 0", field="lambda")
    if not isinstance(reward, RewardSpec):
        reward = RewardSpec(reward)
    iv = spec.interval
    if td is None:
        q_lo = max(c - window, 0.5 * (iv.lo + c)) if np.isfinite(iv.lo) else c - window
        q_hi = min(c + window, 0.5 * (iv.hi + c)) if np.isfinite(iv.hi) else c + window
        query = np.array([q_lo, c, q_hi])
        if gr is None:
            gr = solve_increasing(PairProblem(spec, mu, "increasing", c, 1.0), step=step, query=query)
        if gl is None:
            gl = solve_decreasing(PairProblem(spec, mu, "decreasing", c, 1.0), step=step, query=query)
        td = TransformedDiffusion(spec, combine(lambda1, lambda2, gr, gl))
    ul, ur = td.u_l, td.u_r
    if not (np.isfinite(ul) and np.isfinite(ur)):
        raise ValidationError("transformed scale must be bounded on both sides", field="lambda")
    ok, sup = check_finiteness(reward, td)
    if not ok:
        raise NumericalError("value is infinite: f/g is unbounded", sup=sup)
    if reward.limits == "auto":
        limits = (_auto_limit(reward, td, "lo"), _auto_limit(reward, td, "hi"))
    else:
        limits = tuple(reward.limits)

    u = _u_grid(ul, ur, n_grid)
    F, _ = _F_of_u(reward, td, u)
    for _ in range(refine_rounds):
        uu = np.concatenate([[ul], u, [ur]])
        FF = np.concatenate([[limits[0]], F, [limits[1]]])
        maj = concave_majorant(uu, FF)
        # refine only where a chord of the hull starts or ends (tangency points)
        kk = maj.knots
        edge = np.zeros(kk.size, dtype=bool)
        gaps = np.diff(kk) > 1
        edge[:-1] |= gaps
        edge[1:] |= gaps
        kn = kk[edge & (kk > 0) & (kk < uu.size - 1)]
        if kn.size == 0:
            break
        new = []
        for i in kn:
            new.append(np.linspace(uu[i - 1], uu[i + 1], 34)[1:-1])
        new = np.concatenate(new)
        new = new[(new > ul) & (new < ur) & ~np.isin(new, u)]
        if new.size == 0:
            break
        Fn, _ = _F_of_u(reward, td, new)
        u = np.concatenate([u, new])
        F = np.concatenate([F, Fn])
        o = np.argsort(u)
        u, F = u[o], F[o]
    uu = np.concatenate([[ul], u, [ur]])
    FF = np.concatenate([[limits[0]], F, [limits[1]]])
    maj = concave_majorant(uu, FF)
    region, runs = _contact_region(td, maj)
    verdict = "optimal"
    acc_lo = any(r[2] for r in runs)
    acc_hi = any(r[3] for r in runs)
    tol = 1e-9 * (1 + float(np.max(np.abs(maj.G))))
    if not acc_lo and abs(maj.G[0]) > tol:
        verdict = "eps-optimal"
    if not acc_hi and abs(maj.G[-1]) > tol:
        verdict = "eps-optimal"
    return StoppingSolution(td, reward, maj, limits, region, verdict, (float(lambda1), float(lambda2)),
                            {"samples": int(uu.size), "sup_f_over_g": sup})

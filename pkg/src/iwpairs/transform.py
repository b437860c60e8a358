"""Path transformation by an Ito-Watanabe pair (g, A).

Under the transformed measures the diffusion has scale s_g = int ds / g^2
(anchored at the normalisation point c of g), speed g^2 m, and the Revuz
measure of A becomes g^2 mu. Everything is computed in the s-variable from a
table of (s, g, p-, p+) values; between nodes g is the cubic Hermite
interpolant used by the solver, outside the table it is continued affinely
in s, which is exact where mu has no mass.
"""
from __future__ import annotations

import csv
import io
import math

import numpy as np
from numpy.polynomial.legendre import leggauss

from .diffusion_core import (DiffusionSpec, ScaleFunction, SDE, _as_array, _ext_json,
                             _potential_from_scale)
from .errors import (NotItoWatanabePairError, OutOfRangeError, RecurrentError,
                     ValidationError)
from .ie_solver import GeneralSolution, PairSolution, _hermite, march_measure_ode

_GX, _GW = leggauss(16)
_RATIO = 1.05


def _affine_tail(g0, q, t):
    """int_0^t du / (g0 + q u)^2 for t >= 0 (t may be inf)."""
    if math.isinf(t):
        return 1.0 / (q * g0) if q > 0 else math.inf
    end = g0 + q * t
    if end <= 0:
        return math.inf
    return t / (g0 * end)


def _growing(g, side):
    if isinstance(g, GeneralSolution):
        return g.lambda1 > 0 if side == "hi" else g.lambda2 > 0
    return (g.direction == "increasing") == (side == "hi")


class _STable:
    """g tabulated against s with one-sided slopes."""

    def __init__(self, x, S, G, PM, PP):
        self.x, self.S, self.G, self.PM, self.PP = (np.asarray(v, dtype=float)
                                                    for v in (x, S, G, PM, PP))

    def cell(self, u):
        return np.clip(np.searchsorted(self.S, u, side="right") - 1, 0, self.S.size - 2)

    def g(self, u):
        i = self.cell(u)
        return _hermite(u, self.S[i], self.S[i + 1], self.G[i], self.G[i + 1],
                        self.PP[i], self.PM[i + 1])

    def dg(self, u, side="left"):
        i = self.cell(u)
        out = _hermite(u, self.S[i], self.S[i + 1], self.G[i], self.G[i + 1],
                       self.PP[i], self.PM[i + 1], deriv=True)
        j = np.clip(np.searchsorted(self.S, u), 0, self.S.size - 1)
        at = self.S[j] == u
        return np.where(at, self.PM[j] if side == "left" else self.PP[j], out)

    def refine(self, scale_inverse, passes=6):
        for _ in range(passes):
            S, G = self.S, self.G
            mid = self.g(0.5 * (S[:-1] + S[1:]))
            hi = np.maximum(np.maximum(G[:-1], G[1:]), mid)
            lo = np.minimum(np.minimum(G[:-1], G[1:]), mid)
            if np.any(lo <= 0):
                raise NotItoWatanabePairError("g vanishes inside the table")
            R = hi / lo
            bad = np.nonzero(R > _RATIO)[0]
            if bad.size == 0:
                return self
            newS = []
            for i in bad:
                n = int(math.ceil(math.log(R[i]) / math.log(_RATIO)))
                n = min(n, 4000)
                g0, g1 = G[i], G[i + 1]
                if abs(g1 - g0) > 1e-12 * max(g0, g1):
                    rr = (max(g0, g1) / min(g0, g1)) ** (1.0 / n)
                    fr = (rr ** np.arange(1, n) - 1.0) / (rr ** n - 1.0)
                    if g1 < g0:
                        fr = 1.0 - fr[::-1]
                else:
                    fr = np.arange(1, n) / n
                newS.append(S[i] + fr * (S[i + 1] - S[i]))
            newS = np.concatenate(newS)
            newS = newS[~np.isin(newS, S)]
            newG = self.g(newS)
            newP = self.dg(newS)
            S2 = np.concatenate([S, newS])
            order = np.argsort(S2, kind="stable")
            self.x = np.concatenate([self.x, scale_inverse(newS)])[order]
            self.S = S2[order]
            self.G = np.concatenate([G, newG])[order]
            self.PM = np.concatenate([self.PM, newP])[order]
            self.PP = np.concatenate([self.PP, newP])[order]
        return self

    def cell_integrals(self):
        S = self.S
        mid = 0.5 * (S[:-1] + S[1:])
        half = 0.5 * (S[1:] - S[:-1])
        u = mid[:, None] + half[:, None] * _GX[None, :]
        i = np.repeat(np.arange(S.size - 1), _GX.size)
        gu = _hermite(u.ravel(), S[i], S[i + 1], self.G[i], self.G[i + 1], self.PP[i], self.PM[i + 1])
        return half * ((1.0 / gu ** 2).reshape(u.shape) @ _GW)

    def partial(self, u):
        """int_{S_i}^{u} dv / g(v)^2 with i the cell of u."""
        i = self.cell(u)
        a = self.S[i]
        mid = 0.5 * (a + u)
        half = 0.5 * (u - a)
        v = mid[..., None] + half[..., None] * _GX
        ii = np.broadcast_to(i[..., None], v.shape)
        gv = _hermite(v, self.S[ii], self.S[ii + 1], self.G[ii], self.G[ii + 1], self.PP[ii],
                      self.PM[ii + 1])
        return i, half * ((1.0 / gv ** 2) @ _GW)


class TransformedDiffusion:
    """The diffusion under the measures defined by g(X) exp(-A)."""

    def __init__(self, base: DiffusionSpec, g, tail_step=1e-4, tail_tol=1e-15):
        if not isinstance(g, (PairSolution, GeneralSolution)):
            raise ValidationError("g must be a PairSolution or GeneralSolution", field="g")
        if g.spec is None or g.mu is None:
            raise ValidationError("g must carry its diffusion and measure", field="g")
        self.base = base
        self.g = g
        self.mu = g.mu
        self.c = float(g.c)
        s = base.scale
        x = np.asarray(g.mesh, dtype=float)
        G = np.asarray(g.g, dtype=float)
        PM = np.asarray(g.p_minus, dtype=float)
        PP = np.asarray(g.p_plus, dtype=float)
        iv = base.interval
        self._zero_end = {"lo": False, "hi": False}
        if G[0] <= 0 and x[0] == iv.lo:
            self._zero_end["lo"] = True
            x, G, PM, PP = x[1:], G[1:], PM[1:], PP[1:]
        if G[-1] <= 0 and x[-1] == iv.hi:
            self._zero_end["hi"] = True
            x, G, PM, PP = x[:-1], G[:-1], PM[:-1], PP[:-1]
        if x.size < 2:
            # a single node: add a neighbour so that the table has one cell
            d = 1.0
            xn = x[0] + d if (not np.isfinite(iv.hi) or x[0] + d < iv.hi) else 0.5 * (x[0] + iv.hi)
            gn = g(np.array([xn]), extrapolate="affine")
            x = np.array([x[0], xn])
            G = np.array([G[0], gn[0]])
            PM = np.array([PM[0], PP[0]])
            PP = np.array([PP[0], PP[0]])
        if np.any(G <= 0):
            raise NotItoWatanabePairError("g must be strictly positive on the mesh")
        self.exact = {"lo": not self.mu.has_mass(iv.lo, x[0]),
                      "hi": not self.mu.has_mass(x[-1], iv.hi)}
        parts = [(x, s(x), G, PM, PP)]
        self.extended = {"lo": False, "hi": False}
        for side in ("lo", "hi"):
            if not self.exact[side] and _growing(g, side):
                ext = self._extend(side, x, G, PM, PP, tail_step, tail_tol)
                if ext is not None:
                    parts.append(ext)
                    self.extended[side] = True
                    self.exact[side] = not self.mu.has_mass(iv.lo, ext[0][0]) if side == "lo" \
                        else not self.mu.has_mass(ext[0][-1], iv.hi)
        X = np.concatenate([p[0] for p in parts])
        order = np.argsort(X, kind="stable")
        X = X[order]
        keep = np.concatenate([[True], np.diff(X) > 0])
        cols = [np.concatenate([p[k] for p in parts])[order][keep] for k in range(1, 5)]
        self.table = _STable(X[keep], *cols).refine(s.inverse)
        t = self.table
        # accumulate outward from c: 1/g^2 can be huge at a far end, and
        # summing from there would cancel catastrophically near c
        ci = t.cell_integrals()
        sc = float(s(np.array([self.c]))[0])
        ic, pc = t.partial(np.array([sc]))
        ic, pc = int(ic[0]), float(pc[0])
        cum = np.empty(ci.size + 1)
        cum[ic] = -pc
        cum[ic + 1:] = (ci[ic] - pc) + np.concatenate([[0.0], np.cumsum(ci[ic + 1:])])
        cum[:ic] = -pc - np.cumsum(ci[:ic][::-1])[::-1]
        self._cum = cum
        self.u_l, self.u_r = self._tail("lo"), self._tail("hi")
        if self.u_l == -math.inf and self.u_r == math.inf:
            self.transient = False
        else:
            self.transient = True
        self.attainable = {"lo": bool(np.isfinite(self.u_l)), "hi": bool(np.isfinite(self.u_r))}
        self.s_g = ScaleFunction(self._s_g_x, iv, derivative=self.ds_g_dx, lo_limit=self.u_l,
                                 hi_limit=self.u_r, inverse=self.inverse, kind="transformed",
                                 description={"type": "transformed", "c": self.c})
        self.m_g = base.speed.scaled(lambda v: self.g_of_x(v) ** 2)
        self.mu_g = self.mu.scaled(lambda v: self.g_of_x(v) ** 2)

    # construction helpers -------------------------------------------------
    def _extend(self, side, x, G, PM, PP, step, tol):
        """March the outward-growing solution until the remaining tail is negligible."""
        spec, mu = self.base, self.mu
        iv = spec.interval
        pieces = []
        if side == "hi":
            xe, ge, pe, bound_x = x[-1], G[-1], PP[-1], iv.hi
        else:
            xe, ge, pe, bound_x = x[0], G[0], PM[0], iv.lo
        span = max(1.0, x[-1] - x[0])
        total = 0.0
        for k in range(80):
            if np.isfinite(bound_x):
                gap = abs(bound_x - xe)
                if gap <= 1e-12 * max(1.0, abs(bound_x)):
                    break
                xn = xe + (0.5 if k < 60 else 0.999) * (bound_x - xe)
            else:
                xn = xe + (span * 2.0 ** k if side == "hi" else -span * 2.0 ** k)
            traj = march_measure_ode(spec, mu, xe, ge, pe, xn, step=step)
            gv, pmv, ppv = traj.values()
            if not np.all(np.isfinite(gv)) or np.any(gv <= 0):
                break
            pieces.append((traj.mesh, traj.s, gv, pmv, ppv))
            if side == "hi":
                xe, ge, pe = traj.mesh[-1], gv[-1], ppv[-1]
                T = spec.s_hi - traj.s[-1]
                q = pe
            else:
                xe, ge, pe = traj.mesh[0], gv[0], pmv[0]
                T = traj.s[0] - spec.s_lo
                q = -pe
            inc = np.sum(1.0 / gv ** 2 * np.abs(np.gradient(traj.s))) if gv.size > 1 else 0.0
            total += inc
            rem = _affine_tail(ge, q, T) if q > 0 or not math.isinf(T) else math.inf
            if rem <= tol * (1.0 + total) or not mu.has_mass(*((xe, iv.hi) if side == "hi" else (iv.lo, xe))):
                break
            if ge > 1e250:
                break
        if not pieces:
            return None
        cols = [np.concatenate([p[k] for p in pieces]) for k in range(5)]
        return tuple(cols)

    def _tail(self, side):
        t = self.table
        if side == "hi":
            if self._zero_end["hi"]:
                return math.inf
            T = self.base.s_hi - t.S[-1]
            if not self.exact["hi"] and not _growing(self.g, "hi") and math.isinf(T):
                return math.inf
            return self._cum[-1] + _affine_tail(t.G[-1], t.PP[-1], T)
        if self._zero_end["lo"]:
            return -math.inf
        T = t.S[0] - self.base.s_lo
        if not self.exact["lo"] and not _growing(self.g, "lo") and math.isinf(T):
            return -math.inf
        return self._cum[0] - _affine_tail(t.G[0], -t.PM[0], T)

    # evaluation -------------------------------------------------------------
    def _check_range(self, u, extrapolate):
        t = self.table
        if extrapolate:
            return
        if np.any(u < t.S[0]) and not self.exact["lo"]:
            raise OutOfRangeError("outside the tabulated range of g (mass beyond)", field="x")
        if np.any(u > t.S[-1]) and not self.exact["hi"]:
            raise OutOfRangeError("outside the tabulated range of g (mass beyond)", field="x")

    def g_of_s(self, u, extrapolate=False):
        t = self.table
        u = _as_array(u)
        self._check_range(u, extrapolate)
        out = t.g(u)
        out = np.where(u < t.S[0], t.G[0] + t.PM[0] * (u - t.S[0]), out)
        out = np.where(u > t.S[-1], t.G[-1] + t.PP[-1] * (u - t.S[-1]), out)
        return out

    def g_of_x(self, x, extrapolate=False):
        return self.g_of_s(self.base.scale(_as_array(x)), extrapolate)

    def s_g_of_s(self, u, extrapolate=False):
        t = self.table
        u = _as_array(u)
        self._check_range(u, extrapolate)
        flat = u.ravel()
        out = np.empty_like(flat)
        inside = (flat >= t.S[0]) & (flat <= t.S[-1])
        if inside.any():
            i, p = t.partial(flat[inside])
            out[inside] = self._cum[i] + p
        for k in np.nonzero(flat > t.S[-1])[0]:
            out[k] = self._cum[-1] + _affine_tail(t.G[-1], t.PP[-1], flat[k] - t.S[-1])
        for k in np.nonzero(flat < t.S[0])[0]:
            out[k] = self._cum[0] - _affine_tail(t.G[0], -t.PM[0], t.S[0] - flat[k])
        return out.reshape(u.shape)

    def _s_g_x(self, x):
        x = _as_array(x)
        return self.s_g_of_s(self.base.scale(x))

    def __call__(self, x):
        out = self.s_g(x)
        return out if np.ndim(out) else float(out)

    def ds_g_dx(self, x):
        x = _as_array(x)
        return self.base.scale.derivative(x) / self.g_of_x(x) ** 2

    def inverse(self, v):
        """x with s_g(x) = v."""
        t = self.table
        v = _as_array(v)
        flat = v.ravel()
        if np.any((flat <= self.u_l) | (flat >= self.u_r)):
            raise OutOfRangeError("value outside (u_l, u_r)", field="u")
        u = np.empty_like(flat)
        lo_c, hi_c = self._cum[0], self._cum[-1]
        mid = (flat >= lo_c) & (flat <= hi_c)
        if mid.any():
            vv = flat[mid]
            i = np.clip(np.searchsorted(self._cum, vv, side="right") - 1, 0, t.S.size - 2)
            a, b = t.S[i].copy(), t.S[i + 1].copy()
            for _ in range(100):
                m = 0.5 * (a + b)
                _, p = t.partial(m)
                val = self._cum[t.cell(m)] + p
                right = val < vv
                a = np.where(right, m, a)
                b = np.where(right, b, m)
                if np.all(b - a <= 1e-15 * np.maximum(1.0, np.abs(m))):
                    break
            u[mid] = 0.5 * (a + b)
        hi_m = flat > hi_c
        if hi_m.any():
            w = flat[hi_m] - hi_c
            g0, q = t.G[-1], t.PP[-1]
            u[hi_m] = t.S[-1] + w * g0 ** 2 / (1.0 - w * q * g0)
        lo_m = flat < lo_c
        if lo_m.any():
            w = lo_c - flat[lo_m]
            g0, q = t.G[0], -t.PM[0]
            u[lo_m] = t.S[0] - w * g0 ** 2 / (1.0 - w * q * g0)
        x = self.base.scale.inverse(u)
        return x.reshape(v.shape)

    def drift_g(self, x):
        """b + sigma^2 g'/g with the left derivative of g."""
        if self.base.sde is None:
            raise ValidationError("base diffusion has no SDE form", field="sde")
        x = _as_array(x)
        sx = self.base.scale(x)
        self._check_range(sx, False)
        t = self.table
        p = t.dg(np.clip(sx, t.S[0], t.S[-1]), "left")
        p = np.where(sx < t.S[0], t.PM[0], np.where(sx > t.S[-1], t.PP[-1], p))
        gx = self.g_of_s(sx)
        out = self.base.sde.b(x) + self.base.sde.s(x) ** 2 * p * self.base.scale.derivative(x) / gx
        return out if out.ndim else float(out)

    def potential(self, x, y):
        sx, sy = self.s_g(np.minimum(x, y)), self.s_g(np.maximum(x, y))
        if not self.transient:
            raise RecurrentError("transformed diffusion is recurrent")
        return _potential_from_scale(sx, sy, self.u_l, self.u_r)

    def as_spec(self) -> DiffusionSpec:
        sde = None
        if self.base.sde is not None:
            sde = SDE(self.drift_g, self.base.sde.sigma, {"transformed": True})
        return DiffusionSpec(self.base.interval, self.s_g, self.m_g, sde)

    # output -------------------------------------------------------------------
    def to_json(self, grid=None):
        x = self.table.x if grid is None else _as_array(grid)
        sg = self.s_g(x)
        out = {"kind": "TransformedDiffusion", "c": self.c, "u_l": _ext_json(self.u_l),
               "u_r": _ext_json(self.u_r), "transient": self.transient,
               "attainable": self.attainable, "x": x.tolist(), "s_g": sg.tolist()}
        if self.base.sde is not None:
            out["drift"] = np.asarray(self.drift_g(x)).tolist()
        return out

    def to_csv(self, grid=None):
        x = self.table.x if grid is None else _as_array(grid)
        sg = self.s_g(x)
        gx = self.g_of_x(x)
        dr = self.drift_g(x) if self.base.sde is not None else np.full(x.shape, np.nan)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "g", "s_g", "drift_g"])
        for row in zip(x, gx, sg, np.atleast_1d(dr)):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def transform(spec: DiffusionSpec, g, **kw) -> TransformedDiffusion:
    return TransformedDiffusion(spec, g, **kw)


def q_boundary_probabilities(td: TransformedDiffusion, x):
    """(P(X -> lo), P(X -> hi)) under the transformed measures."""
    if not td.transient:
        raise RecurrentError("transformed diffusion is recurrent: no boundary law")
    ul, ur = td.u_l, td.u_r
    if math.isinf(ul):
        return 0.0, 1.0
    if math.isinf(ur):
        return 1.0, 0.0
    sx = float(td.s_g(np.array([x]))[0])
    pr = (sx - ul) / (ur - ul)
    return 1.0 - pr, pr


def q_hitting_probability(td: TransformedDiffusion, x, y):
    """Probability of ever hitting y from x under the transformed measures."""
    if not td.transient:
        raise RecurrentError("transformed diffusion is recurrent")
    td.base.interval.check_interior(x, "x")
    td.base.interval.check_interior(y, "y")
    if x == y:
        return 1.0
    return float(td.potential(x, y) / td.potential(y, y))


def local_time_terminal_rate(td: TransformedDiffusion, y):
    """Exponential rate of the total semimartingale local time at y under Q^y."""
    if not td.transient:
        raise RecurrentError("transformed diffusion is recurrent")
    td.base.interval.check_interior(y, "y")
    d = float(td.ds_g_dx(np.array([y]))[0])
    return d / (2.0 * float(td.potential(y, y)))

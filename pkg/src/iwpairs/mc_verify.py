"""Monte Carlo checks of pair values, martingales, hitting laws and stopping rules.

Two schemes:

* ``euler_sde``: adaptive Euler-Maruyama on the SDE form with time step
  dt = clip((d / refine)^2, step, dt_max), d the distance to the nearest
  barrier or band edge. Barrier crossings between grid times are caught with
  the Brownian-bridge crossing probability. A accrues q dt with q = dmu/dm;
  an atom (y, w) adds w times the occupation time of [y-h, y+h] divided by
  m([y-h, y+h]).
* ``scale_random_walk``: the embedded walk of the diffusion on a node grid in
  the scale coordinate. Hitting probabilities of the walk are exact. At a
  node carrying an atom of mass w the local time of one sojourn is exponential
  with mean u_cell, so A increases by w times that draw; density parts add
  their expected increment per sojourn.

Paths come in batches of ``batch_size``; batch k uses the k-th child of
``SeedSequence(seed)``, so estimates do not depend on ``n_jobs``.
"""
from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss

from .diffusion_core import DiffusionSpec, RadonMeasure, _broadcast
from .errors import MCAcceptanceError, RecurrentError, ValidationError

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

RUNNING, EXIT_LO, EXIT_HI, KILLED, TRUNCATED = -1, 0, 1, 2, 3
_STATUS = {EXIT_LO: "exit_lo", EXIT_HI: "exit_hi", KILLED: "killed", TRUNCATED: "horizon"}


_ALIASES = {"euler": "euler_sde", "euler_sde": "euler_sde",
            "chain": "scale_random_walk", "scale_random_walk": "scale_random_walk"}


@dataclass
class SimConfig:
    scheme: str = "euler_sde"
    step: Optional[float] = None      # smallest time step (euler_sde) or node spacing in s (scale_random_walk)
    band_halfwidth: Optional[float] = None   # default 4 sqrt(sigma^2 step) at the level
    n_paths: int = 100_000
    seed: int = 12345
    horizon: float = 1e4
    batch_size: int = 10_000
    dt_max: float = 1.0
    refine: float = 5.0
    a_cap: float = 40.0
    absorb_tol: float = 1e-7
    max_steps: int = 10_000_000
    n_jobs: int = 1

    def __post_init__(self):
        if self.scheme not in _ALIASES:
            raise ValidationError("scheme must be 'euler_sde' or 'scale_random_walk'", field="mc.scheme")
        self.scheme = _ALIASES[self.scheme]
        if self.step is None:
            self.step = 1e-6 if self.scheme == "euler_sde" else 0.05
        for name in ("step", "band_halfwidth", "horizon", "dt_max", "refine", "a_cap", "absorb_tol"):
            v = getattr(self, name)
            if v is None and name == "band_halfwidth":
                continue
            try:
                v = float(v)
            except (TypeError, ValueError):
                raise ValidationError(f"{name} must be a number", field=f"mc.{name}") from None
            if not v > 0 or (math.isinf(v) and name not in ("horizon", "dt_max")):
                raise ValidationError(f"{name} must be positive", field=f"mc.{name}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer", field="mc.seed")
        if int(self.n_paths) < 1:
            raise ValidationError("need at least one path", field="mc.n_paths")
        if int(self.batch_size) < 1:
            raise ValidationError("batch_size must be positive", field="mc.batch_size")

    def to_dict(self):
        return asdict(self)


@dataclass
class EstimateResult:
    mean: float
    std_error: float
    n_effective: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"mean": self.mean, "se": self.std_error, "n": self.n_effective,
                "flags": list(self.diagnostics.get("flags", [])),
                "diagnostics": {k: v for k, v in self.diagnostics.items() if k != "flags"}}

    @classmethod
    def from_dict(cls, d):
        diag = dict(d.get("diagnostics", {}))
        diag["flags"] = list(d.get("flags", []))
        return cls(float(d["mean"]), float(d["se"]), int(d["n"]), diag)

    @property
    def flags(self):
        return self.diagnostics.get("flags", [])

    def within(self, target, k=3.0):
        return abs(self.mean - target) <= k * self.std_error



@dataclass
class SimulationResult:
    """Raw path ensemble: end position, accrued A, recorded local time,
    elapsed time (nan for the walk) and status per path."""
    x_end: np.ndarray
    A: np.ndarray
    L: np.ndarray
    t: np.ndarray
    status: np.ndarray
    steps: int
    scheme: str
    flags: list = field(default_factory=list)

    @property
    def ok(self):
        return self.status != TRUNCATED

    @property
    def truncation_rate(self):
        return float(np.mean(self.status == TRUNCATED))

    def all_flags(self):
        out = list(self.flags)
        if self.truncation_rate > 0.01:
            out.append(f"horizon cap hit on {self.truncation_rate:.3g} of paths (> 1%)")
        return out

    def counts(self):
        return {name: int(np.sum(self.status == k)) for k, name in _STATUS.items()}

    def diagnostics(self):
        return {"counts": self.counts(), "truncation_rate": self.truncation_rate, "steps": self.steps,
                "scheme": self.scheme, "flags": self.all_flags()}


# --------------------------------------------------------------------------
# helpers


def _q_density(spec, mu):
    """x -> dmu/dm for the density part (None if mu has none)."""
    if mu.density is None:
        return None
    if spec.speed.density is None:
        raise ValidationError("speed measure needs a density for euler_sde", field="speed")

    def q(x):
        return mu.density_at(x) / spec.speed.density_at(x)
    return q


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    n = v.size
    if n == 0:
        return math.nan, math.inf
    if n == 1:
        return float(v[0]), math.inf
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n))


def _batches(cfg):
    n = int(cfg.n_paths)
    B = int(cfg.batch_size)
    nb = (n + B - 1) // B
    kids = np.random.SeedSequence(int(cfg.seed)).spawn(nb)
    return [(min(B, n - k * B), kids[k]) for k in range(nb)]


def _run_batches(fn, cfg):
    jobs = _batches(cfg)
    if cfg.n_jobs == 1:
        return [fn(size, child) for size, child in jobs]
    from joblib import Parallel, delayed
    return Parallel(n_jobs=cfg.n_jobs)(delayed(fn)(size, child) for size, child in jobs)


def _merge(parts, scheme, flags=()):
    cat = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    return SimulationResult(*cat, steps=int(sum(p[5] for p in parts)), scheme=scheme, flags=list(flags))


def _value(fn, x):
    return float(_broadcast(fn, np.array([float(x)]))[0])


# --------------------------------------------------------------------------
# euler_sde


def _bands(spec, levels, cfg):
    """Band half-widths per level; warns when narrower than one step's spread."""
    sig = spec.sde.s(np.asarray(levels, dtype=float)) if len(levels) else np.zeros(0)
    spread = np.abs(sig) * math.sqrt(cfg.step)
    if cfg.band_halfwidth is None:
        return 4.0 * spread, []
    h = np.full(len(levels), float(cfg.band_halfwidth))
    flags = []
    if np.any(h < spread):
        msg = "band half-width below sqrt(step) sigma; local-time estimate unreliable"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        flags.append(msg)
    return h, flags


def _euler_batch(spec, mu, x0, size, child, cfg, lo, hi, eff_lo, eff_hi, record, bands, kinks):
    rng = np.random.default_rng(child)
    drift, sig = spec.sde.b, spec.sde.s
    q = _q_density(spec, mu)
    s = spec.scale
    ax = mu.atom_x[(mu.atom_x > lo) & (mu.atom_x < hi)]
    aw = mu.atom_w[(mu.atom_x > lo) & (mu.atom_x < hi)]
    hb = bands[:ax.size]
    if ax.size:
        m_band = np.array([spec.speed.total_mass(y - h, y + h) for y, h in zip(ax, hb)])
        if np.any(m_band <= 0):
            raise ValidationError("speed measure must charge the atom bands", field="speed")
        a_rate = aw / m_band
    levels = ax if record is None else np.append(ax, float(record))
    hl = bands[:levels.size]
    x = np.full(size, float(x0))
    A = np.zeros(size)
    L = np.zeros(size)
    t = np.zeros(size)
    status = np.full(size, RUNNING)
    idx = np.arange(size)
    s0 = _value(s, x0)
    x_esc_hi = x_esc_lo = None
    if eff_hi is not None:
        x_esc_hi = _value(s.inverse, eff_hi - cfg.absorb_tol * (eff_hi - s0))
    if eff_lo is not None:
        x_esc_lo = _value(s.inverse, eff_lo + cfg.absorb_tol * (s0 - eff_lo))
    halo = max(0.02, 4.0 * math.sqrt(cfg.step))
    steps = 0
    for _ in range(int(cfg.max_steps)):
        if idx.size == 0:
            break
        xa = x[idx]
        d = np.minimum(xa - lo, hi - xa)
        if levels.size:
            gap = np.abs(np.abs(xa[:, None] - levels[None, :]) - hl[None, :]) + 0.25 * hl[None, :]
            d = np.minimum(d, gap.min(axis=1))
        if kinks.size:
            # a halo around kinks keeps dt bounded below; a recurrent path returns to a point
            # about 1/d times before leaving, so resolving it further costs too many steps
            d = np.minimum(d, np.abs(xa[:, None] - kinks[None, :]).min(axis=1) + halo)
        dt = np.clip((d / cfg.refine) ** 2, cfg.step, cfg.dt_max)
        dt = np.minimum(dt, np.maximum(cfg.horizon - t[idx], 1e-300))
        sg = sig(xa)
        xn = xa + drift(xa) * dt + sg * np.sqrt(dt) * rng.standard_normal(idx.size)
        dA = np.zeros(idx.size)
        if q is not None:
            dA += q(xa) * dt
        if ax.size:
            inside = np.abs(xa[:, None] - ax[None, :]) < hb[None, :]
            dA += (inside * a_rate[None, :]).sum(axis=1) * dt
        if record is not None:
            hr = hl[-1]
            L[idx] += (np.abs(xa - record) < hr) * sg ** 2 * dt / (2 * hr)
        u = rng.random(idx.size)
        var = sg ** 2 * dt
        hit_lo = xn <= lo
        hit_hi = xn >= hi
        if np.isfinite(lo):
            p = np.exp(-2 * np.maximum(xa - lo, 0) * np.maximum(xn - lo, 0) / var)
            hit_lo |= (~hit_hi) & (u < p)
        if np.isfinite(hi):
            p = np.exp(-2 * np.maximum(hi - xa, 0) * np.maximum(hi - xn, 0) / var)
            hit_hi |= (~hit_lo) & (u < p)
        A[idx] += dA
        t[idx] += dt
        xn = np.where(hit_lo, lo, np.where(hit_hi, hi, xn))
        x[idx] = xn
        st = np.full(idx.size, RUNNING)
        st[hit_lo] = EXIT_LO
        st[hit_hi] = EXIT_HI
        # transient side: once the chance of coming back is below absorb_tol, call it escaped
        if x_esc_hi is not None:
            st = np.where((st == RUNNING) & (xn >= x_esc_hi), EXIT_HI, st)
        if x_esc_lo is not None:
            st = np.where((st == RUNNING) & (xn <= x_esc_lo), EXIT_LO, st)
        st = np.where((st == RUNNING) & (A[idx] > cfg.a_cap), KILLED, st)
        st = np.where((st == RUNNING) & (t[idx] >= cfg.horizon), TRUNCATED, st)
        status[idx] = st
        idx = idx[st == RUNNING]
        steps += 1
    status[idx] = TRUNCATED
    return x, A, L, t, status, steps


def _euler(spec, mu, x0, cfg, a, b, record=None, kinks=()):
    if spec.sde is None:
        raise ValidationError("euler_sde needs the SDE form of the diffusion", field="sde")
    iv = spec.interval
    lo = iv.lo if a is None else float(a)
    hi = iv.hi if b is None else float(b)
    if not lo < x0 < hi:
        raise ValidationError("start point must lie strictly between the barriers", field="x0")
    eff_lo = spec.s_lo if a is None and np.isfinite(spec.s_lo) else None
    eff_hi = spec.s_hi if b is None and np.isfinite(spec.s_hi) else None
    ax = mu.atom_x[(mu.atom_x > lo) & (mu.atom_x < hi)]
    levels = list(ax) + ([] if record is None else [float(record)])
    bands, flags = _bands(spec, levels, cfg)
    kinks = np.unique(np.concatenate([np.asarray(kinks, dtype=float), mu.breakpoints, spec.speed.atom_x,
                                      spec.speed.breakpoints]))
    kinks = kinks[np.isfinite(kinks) & (kinks > lo) & (kinks < hi)]
    parts = _run_batches(lambda size, child: _euler_batch(spec, mu, x0, size, child, cfg, lo, hi,
                                                          eff_lo, eff_hi, record, bands, kinks), cfg)
    return _merge(parts, "euler_sde", flags)


# --------------------------------------------------------------------------
# scale_random_walk




def _chain_kernel(seed, n, start, pup, ucell, watom, dens, absorbing, rec, a_cap, max_steps,
                  out_node, out_A, out_L, out_status):
    np.random.seed(seed)
    total = 0
    for k in range(n):
        i = start
        A = 0.0
        L = 0.0
        st = -1
        steps = 0
        while True:
            if absorbing[i]:
                st = 0
                break
            if steps >= max_steps:
                st = 3
                break
            dl = -math.log(1.0 - np.random.random()) * ucell[i]
            if i == rec:
                L += dl
            A += watom[i] * dl + dens[i]
            if A > a_cap:
                st = 2
                break
            if np.random.random() < pup[i]:
                i += 1
            else:
                i -= 1
            steps += 1
        total += steps
        out_node[k] = i
        out_A[k] = A
        out_L[k] = L
        out_status[k] = st
    return total


_chain_kernel_jit = njit(cache=True)(_chain_kernel) if njit is not None else None

_GX, _GW = leggauss(16)


@dataclass
class ChainGrid:
    x: np.ndarray
    u: np.ndarray
    pup: np.ndarray
    ucell: np.ndarray
    watom: np.ndarray
    dens: np.ndarray
    absorbing: np.ndarray
    start: int
    rec: int


def chain_grid(spec, mu, x0, a=None, b=None, record=None, step=0.05, n_geo=8, features=()):
    """Node grid in the scale coordinate with transition data."""
    iv = spec.interval
    s = spec.scale
    lo = iv.lo if a is None else float(a)
    hi = iv.hi if b is None else float(b)
    if not lo < x0 < hi:
        raise ValidationError("start point must lie strictly between the barriers", field="x0")
    feats = [x0] + [v for v in mu.atom_x if lo < v < hi] + [v for v in features if lo < v < hi]
    if record is not None:
        if not lo < record < hi:
            raise ValidationError("local-time level must lie between the barriers", field="y")
        feats.append(float(record))
    if mu.density is not None:
        feats += [v for v in mu.breakpoints if lo < v < hi]
    feats = np.unique(np.asarray(feats, dtype=float))
    uf = s(feats)
    span = float(uf[-1] - uf[0])
    if mu.density is None:
        # only atoms: the walk is exact on any node set containing the features
        u = uf.copy()
        width = span if span > 0 else 1.0
    else:
        nodes = [uf[:1]]
        for k in range(uf.size - 1):
            m = max(1, int(math.ceil((uf[k + 1] - uf[k]) / step)))
            nodes.append(np.linspace(uf[k], uf[k + 1], m + 1)[1:])
        u = np.concatenate(nodes)
        width = max(step, span)
    # left end
    if a is not None:
        left = [float(s(np.array([lo]))[0])]
    elif np.isfinite(spec.s_lo):
        gap = u[0] - spec.s_lo
        left = (spec.s_lo + gap * 2.0 ** -np.arange(n_geo, 0, -1)).tolist()
        left = [spec.s_lo] + left
    else:
        left = [-math.inf] + (u[0] - width * 2.0 ** np.arange(n_geo - 1, -1, -1)).tolist()
    if b is not None:
        right = [float(s(np.array([hi]))[0])]
    elif np.isfinite(spec.s_hi):
        gap = spec.s_hi - u[-1]
        right = (spec.s_hi - gap * 2.0 ** -np.arange(1, n_geo + 1)).tolist() + [spec.s_hi]
    else:
        right = (u[-1] + width * 2.0 ** np.arange(n_geo)).tolist() + [math.inf]
    u = np.concatenate([left, u, right])
    u = np.unique(u)
    n = u.size
    absorbing = np.zeros(n, dtype=np.bool_)
    absorbing[0] = absorbing[-1] = True
    if np.isinf(u[0]) and np.isinf(u[-1]) and n <= 3:
        raise RecurrentError("chain needs at least one finite barrier")
    pup = np.zeros(n)
    ucell = np.zeros(n)
    for i in range(1, n - 1):
        ul, uc, ur = u[i - 1], u[i], u[i + 1]
        if np.isinf(ul) and np.isinf(ur):
            raise RecurrentError("sojourn with two infinite neighbours")
        if np.isinf(ul):
            pup[i], ucell[i] = 1.0, ur - uc
        elif np.isinf(ur):
            pup[i], ucell[i] = 0.0, uc - ul
        else:
            pup[i] = (uc - ul) / (ur - ul)
            ucell[i] = (uc - ul) * (ur - uc) / (ur - ul)
    x = np.empty(n)
    fin = (u > spec.s_lo) & (u < spec.s_hi)
    x[fin] = s.inverse(u[fin])
    x[~fin] = np.where(u[~fin] <= spec.s_lo, iv.lo, iv.hi)
    if a is not None:
        x[0] = lo
    if b is not None:
        x[-1] = hi
    for k in range(feats.size):
        j = int(np.argmin(np.abs(u - uf[k])))
        x[j] = feats[k]
    watom = np.zeros(n)
    for xa, w in zip(*mu.atoms_in(lo, hi, "neither")):
        j = int(np.argmin(np.abs(x - xa)))
        watom[j] = w
    dens = np.zeros(n)
    if mu.density is not None:
        for i in range(1, n - 1):
            if not (np.isfinite(u[i - 1]) and np.isfinite(u[i + 1])):
                if mu.density_may_charge(x[i - 1] if np.isfinite(u[i - 1]) else iv.lo,
                                         x[i + 1] if np.isfinite(u[i + 1]) else iv.hi):
                    raise ValidationError("chain scheme cannot handle density on an unbounded cell;"
                                          " use the euler scheme", field="mc.scheme")
                continue
            tot = 0.0
            for xa_, xb_ in ((x[i - 1], x[i]), (x[i], x[i + 1])):
                if not mu.density_may_charge(xa_, xb_):
                    continue
                y = 0.5 * (xa_ + xb_) + 0.5 * (xb_ - xa_) * _GX
                sy = s(y)
                G = (np.minimum(sy, u[i]) - u[i - 1]) * (u[i + 1] - np.maximum(sy, u[i])) / (u[i + 1] - u[i - 1])
                tot += 0.5 * (xb_ - xa_) * np.sum(_GW * G * mu.density_at(y))
            dens[i] = tot
    start = int(np.argmin(np.abs(u - float(s(np.array([x0]))[0]))))
    rec = -1 if record is None else int(np.argmin(np.abs(u - float(s(np.array([record]))[0]))))
    return ChainGrid(x, u, pup, ucell, watom, dens, absorbing, start, rec)


def _chain_batch(grid, size, child, cfg):
    seed = int(child.generate_state(1, dtype=np.uint32)[0])
    node = np.empty(size, dtype=np.int64)
    A = np.empty(size)
    L = np.empty(size)
    st = np.empty(size, dtype=np.int64)
    fn = _chain_kernel_jit if _chain_kernel_jit is not None else _chain_kernel
    steps = fn(seed, size, grid.start, grid.pup, grid.ucell, grid.watom, grid.dens, grid.absorbing,
               grid.rec, float(cfg.a_cap), int(cfg.max_steps), node, A, L, st)
    status = np.where(st == 0, np.where(node == 0, EXIT_LO, EXIT_HI), st)
    return grid.x[node], A, L, np.full(size, np.nan), status, int(steps)


def _chain(spec, mu, x0, cfg, a, b, record=None):
    grid = chain_grid(spec, mu, x0, a, b, record, cfg.step)
    res = _merge(_run_batches(lambda size, child: _chain_batch(grid, size, child, cfg), cfg), "scale_random_walk")
    res.grid = grid
    return res


# --------------------------------------------------------------------------
# public API


def _spec_of(td):
    return td.as_spec() if hasattr(td, "as_spec") else td


def _kinks_of(obj):
    """Levels where the coefficients of a transformed diffusion are not smooth."""
    if hasattr(obj, "as_spec"):
        return tuple(obj.mu.atom_x) + tuple(obj.mu.breakpoints)
    return ()


def simulate(spec, mu: RadonMeasure, x0, config: SimConfig, a=None, b=None,
             record=None) -> SimulationResult:
    """Run paths from x0 until they leave (a, b) (None = the natural end of the
    interval), are killed (A > a_cap) or reach the horizon. `record` is a level
    whose local time is accumulated. Accepts a TransformedDiffusion too."""
    kinks = _kinks_of(spec)
    spec = _spec_of(spec)
    x0 = float(x0)
    spec.interval.check_interior(x0, "x0")
    if config.scheme == "scale_random_walk":
        return _chain(spec, mu, x0, config, a, b, record)
    return _euler(spec, mu, x0, config, a, b, record, kinks)


def _estimate(values, res, **extra):
    ok = res.ok
    mean, se = _mean_se(values[ok])
    diag = res.diagnostics()
    diag.update(extra)
    return EstimateResult(mean, se, int(ok.sum()), diag)


def estimate_pair_value(spec, mu, x, c, config: SimConfig, direction="increasing") -> EstimateResult:
    """E^x[1{T_c < T_l} exp(-A_{T_c})] for x < c (increasing), or the mirror
    image with T_r for x > c. The target is g(x)/g(c)."""
    spec = _spec_of(spec)
    x, c = float(x), float(c)
    if direction == "increasing":
        if not x < c:
            raise ValidationError("increasing direction needs x < c", field="x")
        res = simulate(spec, mu, x, config, a=None, b=c)
        hit = res.status == EXIT_HI
    elif direction == "decreasing":
        if not x > c:
            raise ValidationError("decreasing direction needs x > c", field="x")
        res = simulate(spec, mu, x, config, a=c, b=None)
        hit = res.status == EXIT_LO
    else:
        raise ValidationError("direction must be increasing or decreasing", field="direction")
    vals = np.where(hit, np.exp(-res.A), 0.0)
    return _estimate(vals, res)


def estimate_exit_value(spec, g: Callable, mu, x, a, b, config: SimConfig) -> EstimateResult:
    """E^x[g(X_T) exp(-A_T)], T the exit time of (a, b)."""
    spec = _spec_of(spec)
    x = float(x)
    if not (a is not None and b is not None and a < x < b):
        raise ValidationError("need finite a < x < b", field="x")
    res = simulate(spec, mu, x, config, a, b)
    gx = np.where(res.status == EXIT_LO, _value(g, a), _value(g, b))
    vals = np.where((res.status == EXIT_LO) | (res.status == EXIT_HI), np.exp(-res.A) * gx, 0.0)
    return _estimate(vals, res)


def martingale_check(spec, g: Callable, mu, x, a, b, config: SimConfig) -> EstimateResult:
    """Mean of g(X_T) exp(-A_T) - g(x) over exits from (a, b); zero for a pair."""
    r = estimate_exit_value(spec, g, mu, x, a, b, config)
    g0 = _value(g, x)
    r.mean -= g0
    r.diagnostics["g_x"] = g0
    return r


def estimate_q_hitting(td, x, y, config: SimConfig) -> EstimateResult:
    """Fraction of transformed paths from x that ever reach y."""
    spec = _spec_of(td)
    x, y = float(x), float(y)
    if x == y:
        return EstimateResult(1.0, 0.0, int(config.n_paths), {"flags": []})
    a, b = (y, None) if y < x else (None, y)
    res = simulate(td, RadonMeasure.zero(), x, config, a, b)
    hit = (res.status == (EXIT_LO if y < x else EXIT_HI)).astype(float)
    # a path that has not reached y by the horizon counts as a miss
    mean, se = _mean_se(hit)
    est = EstimateResult(mean, se, int(hit.size), res.diagnostics())
    side = "hi" if y < x else "lo"
    eff = spec.s_hi if side == "hi" else spec.s_lo
    if np.isfinite(eff) and config.scheme == "euler_sde":
        est.diagnostics["flags"].append(
            f"escape declared when the return chance drops below absorb_tol={config.absorb_tol:g}")
    return est


@dataclass
class LocalTimeResult:
    mean: EstimateResult
    cv: EstimateResult

    def to_dict(self):
        return {"mean": self.mean.to_dict(), "cv": self.cv.to_dict()}


def _cv_delta(v):
    """Coefficient of variation and its delta-method standard error."""
    n = v.size
    m1 = float(v.mean())
    m2 = float(np.mean(v ** 2))
    sd = math.sqrt(max(m2 - m1 * m1, 0.0))
    if n < 3 or sd == 0 or m1 == 0:
        return (sd / m1 if m1 else math.nan), math.inf
    C = np.cov(np.vstack([v, v ** 2])) / n
    grad = np.array([-1.0 / sd - sd / m1 ** 2, 1.0 / (2 * sd * m1)])
    return sd / m1, float(math.sqrt(max(grad @ C @ grad, 0.0)))


def estimate_local_time_total(td, y, config: SimConfig, x=None) -> LocalTimeResult:
    """Total semimartingale local time at y over the lifetime, started at x
    (default y). Reports the mean and the coefficient of variation."""
    spec = _spec_of(td)
    y = float(y)
    x = y if x is None else float(x)
    res = simulate(td, RadonMeasure.zero(), x, config, record=y)
    if config.scheme == "scale_random_walk":
        # the walk records local time against the speed measure
        L = 2.0 * res.L / _value(spec.scale.derivative, y)
    else:
        L = res.L
    ok = res.ok
    Lk = L[ok]
    m1, se1 = _mean_se(Lk)
    cv, cv_se = _cv_delta(Lk)
    diag = res.diagnostics()
    return LocalTimeResult(EstimateResult(m1, se1, int(Lk.size), diag),
                           EstimateResult(cv, cv_se, int(Lk.size), dict(diag, flags=list(diag["flags"]))))


def estimate_stopping_value(spec, mu, reward: Callable, rule, x, config: SimConfig) -> EstimateResult:
    """Value of 'stop on entering the region' from x; a path never stopped
    pays nothing. `rule` is a list of closed intervals (lo, hi)."""
    spec = _spec_of(spec)
    x = float(x)
    region = [(float(lo), float(hi)) for lo, hi in rule]
    for lo, hi in region:
        if lo <= x <= hi:
            return EstimateResult(_value(reward, x), 0.0, int(config.n_paths), {"flags": [], "immediate": True})
    below = [hi for lo, hi in region if hi < x]
    above = [lo for lo, hi in region if lo > x]
    a = max(below) if below else None
    b = min(above) if above else None
    res = simulate(spec, mu, x, config, a, b)
    stopped = np.zeros(res.status.size, dtype=bool)
    if a is not None:
        stopped |= res.status == EXIT_LO
    if b is not None:
        stopped |= res.status == EXIT_HI
    fx = _broadcast(reward, np.where(stopped, res.x_end, x))
    vals = np.where(stopped, np.exp(-res.A) * fx, 0.0)
    return _estimate(vals, res)


def require_within(result: EstimateResult, target, k=3.0, name="estimate"):
    """Raise MCAcceptanceError unless |mean - target| <= k SE."""
    if not result.within(target, k):
        raise MCAcceptanceError(f"{name} outside {k:g} standard errors of the target", mean=result.mean,
                                se=result.std_error, target=target)
    return True


LOG_FIELDS = ["name", "mean", "se", "n", "target", "z", "pass", "flags"]


def append_log(path, name, result: EstimateResult, target=None, k=3.0):
    """Append one row to a CSV experiment log (header written on creation)."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    z = "" if target is None or result.std_error == 0 else (result.mean - target) / result.std_error
    ok = "" if target is None else bool(result.within(target, k))
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_FIELDS)
        w.writerow([name, repr(result.mean), repr(result.std_error), result.n_effective,
                    "" if target is None else repr(float(target)), z if z == "" else f"{z:.4f}", ok,
                    ";".join(result.flags)])

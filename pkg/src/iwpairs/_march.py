"""Inner loop of the measure-ODE march.

Cell i runs from node i to node i+1 with scale increment ds[i]. Over a cell
g is taken linear in s, and both integrals of the exact cell relations

    p1- = p0+ + int g dmu,    g1 = g0 + ds p0+ + int (s1 - s) g dmu

are evaluated against that interpolant. a0, a1 are the moments
int (s1 - s)/ds dmu and int (s - s0)/ds dmu; c0, c1 are
int (s1 - s)^2/ds dmu and int (s1 - s)(s - s0)/ds dmu. The scheme is second
order with half the error constant of the trapezoidal rule. jump[i] is the
atom mass at node i.
Values are renormalised when they grow past BIG; shift[i] holds log of the
accumulated factor.
"""
import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

BIG = 1e150
LOG_BIG = math.log(BIG)


def _kernel(ds, a0, a1, c0, c1, jump, g0, p0, g, pm, pp, shift):
    n = g.shape[0]
    g[0] = g0
    pp[0] = p0
    pm[0] = p0 - g0 * jump[0]
    shift[0] = 0.0
    for i in range(n - 1):
        h = ds[i]
        den = 1.0 - c1[i]
        if den <= 0.0:
            return i + 1
        g1 = (g[i] * (1.0 + c0[i]) + h * pp[i]) / den
        p1 = pp[i] + a0[i] * g[i] + a1[i] * g1
        q1 = p1 + g1 * jump[i + 1]
        sh = shift[i]
        if abs(g1) > BIG or abs(q1) > BIG:
            g1 /= BIG
            p1 /= BIG
            q1 /= BIG
            sh += LOG_BIG
            # earlier entries keep their own shift; only the running state is rescaled
        g[i + 1] = g1
        pm[i + 1] = p1
        pp[i + 1] = q1
        shift[i + 1] = sh
    return 0


_kernel_jit = njit(cache=True)(_kernel) if njit is not None else None

_JIT_THRESHOLD = 4000


def run_march(ds, a0, a1, c0, c1, jump, g0, p0):
    n = jump.shape[0]
    g = np.empty(n)
    pm = np.empty(n)
    pp = np.empty(n)
    shift = np.empty(n)
    fn = _kernel_jit if (_kernel_jit is not None and n > _JIT_THRESHOLD) else _kernel
    bad = fn(np.ascontiguousarray(ds, dtype=np.float64), np.ascontiguousarray(a0, dtype=np.float64),
             np.ascontiguousarray(a1, dtype=np.float64), np.ascontiguousarray(c0, dtype=np.float64),
             np.ascontiguousarray(c1, dtype=np.float64), np.ascontiguousarray(jump, dtype=np.float64),
             float(g0), float(p0), g, pm, pp, shift)
    return g, pm, pp, shift, int(bad)

import json
import math

import numpy as np
import pytest

from iwpairs import (DiffusionSpec, Interval, PairProblem, PairSolution, RadonMeasure, combine,
                     exit_expectation_check, fit_decomposition, kappa_from_boundary_identity,
                     march_measure_ode, residual, solve_decreasing, solve_increasing,
                     solve_via_killed_kernel)
from iwpairs.errors import (KappaZeroRegime, SingularDecompositionError, TruncationError,
                            ValidationError)

BM = DiffusionSpec.brownian()
HALF = DiffusionSpec.brownian(Interval(0.0, math.inf))
R2 = math.sqrt(2.0)


def soft(delta):
    return RadonMeasure.from_atoms([(1.0, 1.0 / delta)])


def pair(spec, mu, c, a, **kw):
    kw.setdefault("query", [-3.0, 3.0])
    gr = solve_increasing(PairProblem(spec, mu, "increasing", c, a), **kw)
    gl = solve_decreasing(PairProblem(spec, mu, "decreasing", c, a), **kw)
    return gr, gl


# problem validation

def test_problem_validation():
    with pytest.raises(ValidationError):
        PairProblem(BM, soft(1.0), "sideways", 0.0, 1.0)
    with pytest.raises(ValidationError):
        PairProblem(BM, soft(1.0), "increasing", 0.0, 0.0)
    with pytest.raises(ValidationError):
        PairProblem(HALF, soft(1.0), "increasing", -1.0, 1.0)
    with pytest.raises(ValidationError):
        solve_increasing(PairProblem(BM, soft(1.0), "decreasing", 0.0, 1.0))


# march_measure_ode

def test_march_no_measure_is_constant():
    g, pm, pp = march_measure_ode(BM, RadonMeasure.zero(), 0.0, 1.0, 0.0, 3.0).values()
    assert np.all(g == 1.0) and np.all(pp == 0.0)


def test_march_sinh():
    spec = DiffusionSpec.brownian(Interval(-1.0, 1.0))
    traj = march_measure_ode(spec, RadonMeasure.lebesgue(1.0), -1.0, -math.sinh(1), math.cosh(1), 1.0,
                             step=1e-4)
    g, _, _ = traj.values()
    i0 = np.argmin(np.abs(traj.mesh))
    assert abs(g[i0] - math.sinh(traj.mesh[i0])) < 1e-8
    assert g[-1] == pytest.approx(math.sinh(1), abs=1e-8)


def test_march_exponential():
    traj = march_measure_ode(BM, RadonMeasure.lebesgue(2.0), 0.0, 1.0, R2, 1.0, step=1e-4)
    g, _, _ = traj.values()
    assert g[-1] == pytest.approx(4.11325, abs=1e-5)
    assert g[-1] == pytest.approx(math.exp(R2), rel=1e-8)


def test_march_atom_jump():
    traj = march_measure_ode(BM, soft(0.5), 0.0, 1.0, 0.0, 2.0)
    g, pm, pp = traj.values()
    i = int(np.searchsorted(traj.mesh, 1.0))
    assert pp[i] - pm[i] == pytest.approx(g[i] * 2.0)
    assert g[-1] == pytest.approx(1.0 + 2.0, abs=1e-12)


def test_march_is_linear():
    mu = RadonMeasure.piecewise_constant([-1, 0, 2], [0.3, 0.8], atoms=[(0.5, 1.2)])
    u = march_measure_ode(BM, mu, -1.0, 1.0, 0.2, 2.5).values()[0]
    v = march_measure_ode(BM, mu, -1.0, -0.4, 1.1, 2.5).values()[0]
    w = march_measure_ode(BM, mu, -1.0, 2 * 1.0 + 3 * -0.4, 2 * 0.2 + 3 * 1.1, 2.5).values()[0]
    assert np.max(np.abs(w - (2 * u + 3 * v))) < 1e-10 * np.max(np.abs(w))


def test_march_backwards():
    traj = march_measure_ode(BM, RadonMeasure.lebesgue(2.0), 0.0, 1.0, -R2, -1.0, step=1e-4)
    g, _, _ = traj.values()
    assert traj.mesh[0] == -1.0
    assert g[0] == pytest.approx(math.exp(R2), rel=1e-7)


# solve_increasing / solve_decreasing

@pytest.mark.parametrize("delta", [1.0, 0.5, 0.1])
def test_soft_border_closed_forms(delta):
    gr, gl = pair(BM, soft(delta), 1.0, delta)
    xs = np.linspace(-5, 5, 41)
    assert np.max(np.abs(gr(xs) - (delta + np.maximum(xs - 1, 0)))) < 1e-12
    assert np.max(np.abs(gl(xs) - (delta + np.maximum(1 - xs, 0)))) < 1e-12
    assert gr.kappa == 0 and gl.kappa == 0


def test_exponential_pair():
    gr, gl = pair(BM, RadonMeasure.lebesgue(2.0), 0.0, 1.0, query=[-3.0, 3.0])
    assert gr(-3.0) == pytest.approx(0.014369, abs=1e-6)
    xs = np.linspace(-3, 3, 61)
    assert np.max(np.abs(gr(xs) * np.exp(-R2 * xs) - 1)) < 1e-6
    assert np.max(np.abs(gl(xs) * np.exp(R2 * xs) - 1)) < 1e-6


def test_three_communities_gr():
    d = 0.3
    mu = RadonMeasure.from_atoms([(-1.0, 1 / d), (1.0, 1 / d)])
    gr = solve_increasing(PairProblem(BM, mu, "increasing", -1.0, d))
    assert gr(1.0) == pytest.approx(d + 2, abs=1e-12)
    x = np.array([-3.0, 0.0, 2.5])
    expect = np.array([d, 1 + d, d - 2 / d + 2.5 * 2 * (d + 1) / d])
    assert np.max(np.abs(gr(x) - expect)) < 1e-12


def test_three_communities_gl_slope():
    # the left slope of g_l below -1 is -2(d+1)/(d+2)
    d = 0.3
    mu = RadonMeasure.from_atoms([(-1.0, 1 / d), (1.0, 1 / d)])
    gl = solve_decreasing(PairProblem(BM, mu, "decreasing", -1.0, d))
    x = np.array([-3.0, 0.0, 2.0])
    expect = np.array([d + 2 * 2 * (d + 1) / (d + 2), d - d / (d + 2), d - 2 * d / (d + 2)])
    assert np.max(np.abs(gl(x) - expect)) < 1e-12


def test_zero_measure_decreasing_is_constant():
    gl = solve_decreasing(PairProblem(BM, RadonMeasure.zero(), "decreasing", 0.0, 2.5))
    xs = np.linspace(-4, 4, 9)
    assert np.all(gl(xs) == 2.5) and gl.kappa == 0


def test_half_line_exact_start():
    gr = solve_increasing(PairProblem(HALF, RadonMeasure.lebesgue(2.0), "increasing", 1.0, 1.0),
                          step=1e-4)
    xs = np.linspace(0.01, 2, 50)
    assert np.max(np.abs(gr(xs) - np.sinh(R2 * xs) / np.sinh(R2))) < 1e-7
    assert gr.kappa == pytest.approx(R2 / math.sinh(R2), rel=1e-7)
    assert gr.info["regime"] == "exact-start"


def test_truncation_failure_reports_history():
    with pytest.raises(TruncationError) as ei:
        solve_increasing(PairProblem(BM, RadonMeasure.lebesgue(2.0), "increasing", 0.0, 1.0),
                         n_max=1, tol=1e-30)
    assert "history" in ei.value.details


def test_schedules_agree():
    mu = RadonMeasure.lebesgue(0.7)
    q = np.linspace(-2, 2, 9)
    a = solve_increasing(PairProblem(BM, mu, "increasing", 0.0, 1.0), query=q, ratio=2.0)
    b = solve_increasing(PairProblem(BM, mu, "increasing", 0.0, 1.0), query=q, ratio=3.0)
    assert np.max(np.abs(a(q) - b(q))) < 1e-7


# invariants on accepted solutions

@pytest.fixture(scope="module")
def golden():
    mixed = RadonMeasure.piecewise_constant([-1, 0.5, 2], [0.4, 0.9], atoms=[(0.0, 0.7), (1.5, 1.3)])
    out = []
    for mu, c, a in [(soft(0.5), 1.0, 0.5), (RadonMeasure.lebesgue(2.0), 0.0, 1.0), (mixed, 0.2, 1.0)]:
        out.extend(pair(BM, mu, c, a, step=1e-4))
    return out


def test_positivity_and_monotonicity(golden):
    for sol in golden:
        assert np.all(sol.g > 0)
        d = np.diff(sol.g)
        assert np.all(d >= 0) if sol.direction == "increasing" else np.all(d <= 0)


def test_s_convexity_and_atom_jumps(golden):
    for sol in golden:
        assert np.all(np.diff(sol.p_plus) >= -1e-12)
        for y, m in sol.mu.atoms:
            i = int(np.searchsorted(sol.mesh, y))
            assert sol.mesh[i] == y
            assert sol.p_plus[i] - sol.p_minus[i] == pytest.approx(sol.g[i] * m, rel=1e-12)


def test_recurrent_kappa_zero(golden):
    assert all(sol.kappa == 0 for sol in golden)


def test_normalisation(golden):
    for sol in golden:
        assert sol(sol.c) == pytest.approx(sol.a, rel=1e-12)


def test_residual_small_on_golden(golden):
    rng = np.random.default_rng(3)
    for sol in golden:
        probes = np.sort(rng.uniform(-2.5, 2.5, 32))
        assert residual(sol, probes) < 1e-6


def test_exit_identity_on_golden(golden):
    rng = np.random.default_rng(4)
    for sol in golden:
        t = np.sort(rng.uniform(-2.5, 2.5, (16, 3)), axis=1)
        lhs, rhs = exit_expectation_check(sol, t[:, 0], t[:, 1], t[:, 2])
        assert np.max(np.abs(lhs - rhs)) < 1e-7


def test_g_minus_kappa_s_monotone():
    gr = solve_increasing(PairProblem(HALF, soft(0.5), "increasing", 1.0, 1.0))
    h = gr.g - gr.kappa * gr.s
    assert np.all(np.diff(h) >= -1e-12)


# killed kernel route

def test_killed_kernel_zero_measure():
    sol = solve_via_killed_kernel(PairProblem(HALF, RadonMeasure.zero(), "increasing", 2.0, 3.0))
    xs = np.array([0.5, 1.0, 4.0])
    assert np.allclose(sol(xs), 3.0 * xs / 2.0, atol=1e-12)


def test_killed_kernel_agrees_soft_border():
    prob = PairProblem(HALF, soft(0.5), "increasing", 1.0, 0.5)
    a = solve_via_killed_kernel(prob)
    b = solve_increasing(prob)
    xs = np.linspace(0.05, 4, 40)
    assert np.max(np.abs(a(xs) - b(xs))) < 1e-8


def test_killed_kernel_sinh():
    sol = solve_via_killed_kernel(PairProblem(HALF, RadonMeasure.lebesgue(2.0), "increasing", 1.0, 1.0))
    xs = np.linspace(0.05, 1.5, 20)
    assert np.max(np.abs(sol(xs) - np.sinh(R2 * xs) / np.sinh(R2))) < 1e-8


# residual

def test_residual_exact_piecewise_linear():
    gr, gl = pair(BM, soft(0.5), 1.0, 0.5)
    probes = np.linspace(-3, 3, 32)
    assert residual(gr, probes) < 1e-12 and residual(gl, probes) < 1e-12


def test_residual_second_order():
    mu = RadonMeasure.lebesgue(2.0)
    probes = np.linspace(-1, 1, 32)
    r = [residual(solve_increasing(PairProblem(BM, mu, "increasing", 0.0, 1.0), step=h, query=[-1, 1]),
                  probes) for h in (1e-3, 5e-4)]
    assert r[0] < 1e-6
    assert 3.0 < r[0] / r[1] < 5.0


def test_residual_detects_perturbation():
    gr, _ = pair(BM, soft(0.5), 1.0, 0.5)
    i = int(np.searchsorted(gr.mesh, 2.0))
    g = gr.g.copy()
    g[i] += 0.01
    bad = gr.with_values(g=g)
    assert residual(bad, [gr.mesh[i]]) >= 0.009


# combine and decomposition

def test_combine_examples():
    gr, gl = pair(BM, soft(0.5), 1.0, 0.5)
    xs = np.linspace(-3, 3, 31)
    assert np.allclose(combine(0.0, 2.0, gr, gl)(xs), 2 * gl(xs))
    assert np.max(np.abs(combine(1, 1, gr, gl)(xs) - (1.0 + np.abs(xs - 1)))) < 1e-12
    d = 0.2
    mu = RadonMeasure.from_atoms([(-1.0, 1 / d), (1.0, 1 / d)])
    g = combine(d / (d + 2), 1.0, *pair(BM, mu, -1.0, d))
    inner = g(np.linspace(-0.99, 0.99, 21))
    assert np.ptp(inner) < 1e-12


def test_combine_rejects_mismatch():
    gr, _ = pair(BM, soft(0.5), 1.0, 0.5)
    _, gl = pair(BM, soft(0.25), 1.0, 0.5)
    with pytest.raises(ValidationError):
        combine(1, 1, gr, gl)
    with pytest.raises(ValidationError):
        combine(0, 0, gr, gr)


def test_fit_decomposition_examples():
    gr, gl = pair(BM, soft(0.5), 1.0, 0.5)
    assert fit_decomposition((0.0, gr(0.0)), (2.0, gr(2.0)), gr, gl) == pytest.approx((1.0, 0.0), abs=1e-12)
    g = lambda x: 1.0 + abs(x - 1)
    assert fit_decomposition((-1.0, g(-1.0)), (3.0, g(3.0)), gr, gl) == pytest.approx((1.0, 1.0), abs=1e-12)
    er, el = pair(BM, RadonMeasure.lebesgue(2.0), 0.0, 1.0)
    lam = fit_decomposition((-0.5, math.cosh(-0.5 * R2)), (0.7, math.cosh(0.7 * R2)), er, el)
    assert lam == pytest.approx((0.5, 0.5), abs=1e-6)


def test_fit_decomposition_singular():
    # a basis that repeats the same function cannot be inverted
    gr, _ = pair(BM, soft(0.5), 1.0, 0.5)
    with pytest.raises(SingularDecompositionError):
        fit_decomposition((2.0, 1.0), (3.0, 2.0), gr, gr)


# boundary-slope identity

def test_kappa_identity_zero_measure():
    gr = solve_increasing(PairProblem(HALF, RadonMeasure.zero(), "increasing", 1.0, 2.0))
    assert kappa_from_boundary_identity(gr, 3.0) == pytest.approx(2.0, abs=1e-12)


def test_kappa_identity_sinh():
    mu = RadonMeasure.lebesgue(2.0)
    gr = solve_increasing(PairProblem(HALF, mu, "increasing", 1.0, math.sinh(R2)), step=1e-4)
    k = kappa_from_boundary_identity(gr, np.array([0.4, 1.3]))
    assert k[0] == pytest.approx(R2, rel=1e-7)
    assert abs(k[0] - k[1]) < 1e-8
    assert k[0] == pytest.approx(gr.kappa, abs=1e-8)


def test_kappa_identity_divergent():
    mu = RadonMeasure(lambda x: 1.0 / np.maximum(np.asarray(x) ** 2, 1e-300), support=(0.0, 1.0))
    gr = solve_increasing(PairProblem(HALF, mu, "increasing", 1.0, 1.0))
    assert gr.kappa == 0
    with pytest.raises(KappaZeroRegime):
        kappa_from_boundary_identity(gr, 2.0)


def test_kappa_identity_needs_finite_scale():
    gr, _ = pair(BM, soft(0.5), 1.0, 0.5)
    with pytest.raises(ValidationError):
        kappa_from_boundary_identity(gr, 2.0)


# exit identity

def test_exit_identity_examples():
    gr0 = solve_increasing(PairProblem(HALF, RadonMeasure.zero(), "increasing", 1.0, 1.0))
    lhs, rhs = exit_expectation_check(gr0, 0.5, 1.0, 3.0)
    assert lhs == pytest.approx(rhs, abs=1e-14)
    gr, _ = pair(BM, soft(0.5), 1.0, 0.5)
    lhs, rhs = exit_expectation_check(gr, 0.0, 1.0, 2.0)
    assert lhs == pytest.approx(1.0, abs=1e-12) and rhs == pytest.approx(1.0, abs=1e-12)
    spec = DiffusionSpec.brownian(Interval(-1.0, 1.0))
    sh = solve_increasing(PairProblem(spec, RadonMeasure.lebesgue(1.0), "increasing", 0.5, math.sinh(0.5)),
                          step=1e-4)
    lhs, rhs = exit_expectation_check(sh, -0.5, 0.0, 0.5)
    assert abs(lhs - rhs) < 1e-8


def test_exit_identity_order_checked():
    gr, _ = pair(BM, soft(0.5), 1.0, 0.5)
    with pytest.raises(ValidationError):
        exit_expectation_check(gr, 1.0, 0.0, 2.0)


# serialisation

def test_pair_solution_json_round_trip():
    gr, _ = pair(BM, soft(0.5), 1.0, 0.5)
    d = json.loads(json.dumps(gr.to_json()))
    assert {"mesh", "g", "p_minus", "p_plus", "kappa", "direction", "c", "a"} <= set(d)
    back = PairSolution.from_json(d)
    xs = np.linspace(-2, 3, 11)
    assert np.array_equal(back(xs), gr(xs))
    header = gr.to_csv().splitlines()[0]
    assert header.startswith("x,")

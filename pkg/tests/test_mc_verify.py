import csv
import math

import numpy as np
import pytest

from iwpairs import (DiffusionSpec, PairProblem, RadonMeasure, SimConfig, TransformedDiffusion,
                     estimate_exit_value, estimate_pair_value, estimate_q_hitting,
                     estimate_stopping_value, simulate, solve_increasing)
from iwpairs.errors import MCAcceptanceError, ValidationError
from iwpairs.mc_verify import EstimateResult, append_log, require_within

BM = DiffusionSpec.brownian()
SOFT = RadonMeasure.from_atoms([(1.0, 2.0)])  # delta = 1/2


def walk(**kw):
    kw.setdefault("n_paths", 20_000)
    kw.setdefault("seed", 11)
    return SimConfig(scheme="scale_random_walk", **kw)


def euler(**kw):
    kw.setdefault("n_paths", 4000)
    kw.setdefault("seed", 11)
    kw.setdefault("step", 1e-3)
    return SimConfig(scheme="euler_sde", **kw)


def test_config_validation():
    with pytest.raises(ValidationError):
        SimConfig(scheme="leapfrog")
    with pytest.raises(ValidationError):
        SimConfig(step=0.0)
    with pytest.raises(ValidationError):
        SimConfig(n_paths=0)
    with pytest.raises(ValidationError):
        SimConfig(seed=-1)
    assert SimConfig(scheme="chain").scheme == "scale_random_walk"


def test_same_seed_same_paths():
    a = simulate(BM, SOFT, 0.0, walk(seed=5, n_paths=2000), b=3.0)
    b = simulate(BM, SOFT, 0.0, walk(seed=5, n_paths=2000), b=3.0)
    c = simulate(BM, SOFT, 0.0, walk(seed=6, n_paths=2000), b=3.0)
    assert np.array_equal(a.A, b.A) and np.array_equal(a.status, b.status)
    assert not np.array_equal(a.A, c.A)


def test_results_do_not_depend_on_workers():
    one = estimate_pair_value(BM, SOFT, 0.0, 3.0, walk(batch_size=5000, n_jobs=1))
    two = estimate_pair_value(BM, SOFT, 0.0, 3.0, walk(batch_size=5000, n_jobs=2))
    assert one.mean == two.mean and one.std_error == two.std_error


def test_no_measure_no_killing():
    res = simulate(BM, RadonMeasure.zero(), 0.0, walk(), a=-1.0, b=2.0)
    assert np.all(res.A == 0)
    hi = res.counts()["exit_hi"] / res.status.size
    assert abs(hi - 1 / 3) < 3 * math.sqrt(2 / 9 / res.status.size)


def test_clock_for_constant_density():
    # mu = dx against m = 2dx accrues A = t/2 along every Euler path
    res = simulate(BM, RadonMeasure.lebesgue(1.0), 0.0, euler(n_paths=1000), a=-1.0, b=1.0)
    assert np.allclose(res.A, 0.5 * res.t, rtol=1e-12, atol=1e-12)


def test_pair_value_soft_border():
    res = estimate_pair_value(BM, SOFT, 0.0, 3.0, walk())
    assert res.within(0.5 / 2.5, 3.0)
    with pytest.raises(ValidationError):
        estimate_pair_value(BM, SOFT, 4.0, 3.0, walk())


def test_exit_value_of_pair():
    g = lambda x: 0.5 + np.maximum(np.asarray(x, dtype=float) - 1, 0)
    res = estimate_exit_value(BM, g, SOFT, 0.5, -1.0, 2.5, walk())
    assert res.within(g(0.5), 3.0)


def test_q_hitting_matches_closed_form():
    gr = solve_increasing(PairProblem(BM, SOFT, "increasing", 1.0, 0.5))
    td = TransformedDiffusion(BM, gr)
    res = estimate_q_hitting(td, 2.0, 0.0, walk())
    assert res.within(0.25 / 2.25, 3.0)
    assert estimate_q_hitting(td, 1.0, 1.0, walk()).mean == 1.0


def test_suboptimal_threshold_rule():
    # stopping at 2 instead of 1 for f = x+ under A = t/2 is worth 2 e^{-2} from 0
    res = estimate_stopping_value(BM, RadonMeasure.lebesgue(1.0), lambda x: np.maximum(x, 0.0),
                                  [(2.0, math.inf)], 0.0, euler(seed=3))
    assert res.within(2 * math.exp(-2), 3.0)
    assert res.mean < math.exp(-1) - 3 * res.std_error
    now = estimate_stopping_value(BM, RadonMeasure.lebesgue(1.0), lambda x: np.maximum(x, 0.0),
                                  [(2.0, math.inf)], 2.5, euler())
    assert now.mean == 2.5 and now.diagnostics["immediate"]


def test_horizon_flag():
    res = simulate(BM, RadonMeasure.zero(), 0.0, euler(n_paths=500, horizon=0.01))
    assert res.truncation_rate == 1.0
    assert any("horizon" in f for f in res.all_flags())


def test_walk_rejects_density_on_unbounded_cell():
    with pytest.raises(ValidationError):
        simulate(BM, RadonMeasure.lebesgue(1.0), 0.0, walk(n_paths=10), b=2.0)


def test_estimate_round_trip_and_log(tmp_path):
    r = EstimateResult(0.5, 0.01, 100, {"flags": ["x"], "steps": 3})
    assert EstimateResult.from_dict(r.to_dict()) == r
    assert require_within(r, 0.52)
    with pytest.raises(MCAcceptanceError):
        require_within(r, 0.6)
    log = tmp_path / "log.csv"
    append_log(log, "a", r, 0.5)
    append_log(log, "b", r)
    rows = list(csv.reader(open(log)))
    assert rows[0][0] == "name" and len(rows) == 3 and rows[1][6] == "True"

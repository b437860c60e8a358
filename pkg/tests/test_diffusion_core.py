import math

import numpy as np
import pytest

from iwpairs import (DiffusionSpec, Interval, RadonMeasure, ScaleFunction, SDE, caf_potential,
                     classify_boundaries, killed_potential_density, measure_integrate)
from iwpairs.errors import RecurrentError, ValidationError

BM = DiffusionSpec.brownian()


def test_interval_rejects_empty():
    with pytest.raises(ValidationError):
        Interval(1.0, 1.0)
    with pytest.raises(ValidationError):
        Interval(2.0, -1.0)


def test_interval_is_open():
    iv = Interval(0.0, 1.0)
    assert not iv.contains(0.0) and iv.contains(0.5)
    with pytest.raises(ValidationError):
        iv.check_interior(1.0)


def test_scale_limits_never_approximated():
    s = ScaleFunction.identity(Interval())
    assert s.lo_limit == -math.inf and s.hi_limit == math.inf
    half = ScaleFunction.identity(Interval(0.0, math.inf))
    assert half.lo_limit == 0.0 and half.hi_limit == math.inf


def test_affine_and_tabulated_scale_inverse():
    s = ScaleFunction.affine(2.0, 1.0, Interval())
    xs = np.linspace(-3, 3, 13)
    assert np.allclose(s.inverse(s(xs)), xs, atol=1e-12)
    tab = ScaleFunction.tabulated(np.linspace(0, 2, 21), np.linspace(0, 2, 21) ** 3 + np.linspace(0, 2, 21),
                                  Interval(0.0, 2.0))
    v = np.linspace(0.1, 1.9, 7)
    assert np.allclose(tab.inverse(tab(v)), v, atol=1e-9)
    assert np.all(np.diff(tab(np.linspace(0.01, 1.99, 200))) > 0)


def test_sde_consistency_for_bm():
    BM.check_consistency()


def test_sde_inconsistency_detected():
    spec = DiffusionSpec(Interval(), ScaleFunction.identity(Interval()), RadonMeasure.lebesgue(2.0),
                         SDE(lambda x: np.ones_like(x), lambda x: np.ones_like(x)))
    with pytest.raises(ValidationError):
        spec.check_consistency()


def test_atoms_validated():
    with pytest.raises(ValidationError):
        RadonMeasure.from_atoms([(1.0, 0.0)])
    with pytest.raises(ValidationError):
        RadonMeasure.from_atoms([(1.0, 1.0), (1.0, 2.0)])


# classify_boundaries

def test_bm_recurrent():
    cl = classify_boundaries(BM, RadonMeasure.from_atoms([(0.0, 1.0)]))
    assert cl.recurrent
    assert cl.lo_verdict == "not-applicable" and cl.hi_verdict == "not-applicable"


def test_half_line_atom_finite_at_zero():
    spec = DiffusionSpec.brownian(Interval(0.0, math.inf))
    cl = classify_boundaries(spec, RadonMeasure.from_atoms([(1.0, 1.0)]))
    assert cl.lo_scale_finite and not cl.recurrent
    assert cl.lo_verdict == "finite"


def test_zero_measure_all_finite():
    spec = DiffusionSpec.brownian(Interval(0.0, 1.0))
    cl = classify_boundaries(spec, RadonMeasure.zero())
    assert cl.lo_verdict == cl.hi_verdict == "finite"
    assert not cl.recurrent and cl.lo_scale_finite and cl.hi_scale_finite


def test_divergent_caf_at_boundary():
    # density 1/x^2 near 0: int x * x^-2 dx diverges
    spec = DiffusionSpec.brownian(Interval(0.0, math.inf))
    mu = RadonMeasure(lambda x: 1.0 / np.maximum(np.asarray(x) ** 2, 1e-300), support=(0.0, 1.0))
    assert classify_boundaries(spec, mu).lo_verdict == "infinite"


# potentials

def test_killed_potential_density_values():
    spec = DiffusionSpec.brownian(Interval(0.0, 1.0))
    assert killed_potential_density(spec, 0.0, 1.0, 0.25, 0.75) == pytest.approx(0.0625, abs=1e-15)
    assert killed_potential_density(spec, 0.0, 1.0, 0.0, 0.5) == 0.0
    assert killed_potential_density(spec, 0.0, 1.0, 1.0, 0.5) == 0.0


def test_killed_potential_infinite_scale_limit():
    # a -> -inf with s(-inf) = -inf leaves s(b) - s(x v y)
    assert killed_potential_density(BM, None, 2.0, 0.5, -1.0) == pytest.approx(1.5)


def test_killed_potential_outside_raises():
    spec = DiffusionSpec.brownian(Interval(0.0, 1.0))
    with pytest.raises(ValidationError):
        killed_potential_density(spec, 0.2, 0.8, 0.9, 0.5)


def test_caf_potential_examples():
    spec = DiffusionSpec.brownian(Interval(0.0, 1.0))
    one = lambda y: np.ones_like(np.asarray(y, dtype=float))
    assert caf_potential(spec, RadonMeasure.from_atoms([(0.5, 1.0)]), one, 0.5) == pytest.approx(0.25)
    assert caf_potential(spec, RadonMeasure.lebesgue(1.0, support=(0.0, 1.0)), one, 0.5) == \
        pytest.approx(0.125, abs=1e-10)
    assert caf_potential(spec, RadonMeasure.lebesgue(1.0), lambda y: 0.0 * y, 0.5) == 0.0


def test_caf_potential_recurrent_raises():
    with pytest.raises(RecurrentError):
        caf_potential(BM, RadonMeasure.lebesgue(1.0), lambda y: 1.0 + 0 * y, 0.0)


# measure_integrate

def test_measure_integrate_examples():
    assert measure_integrate(RadonMeasure.from_atoms([(1.0, 2.0)]), lambda x: x ** 2, 0.0, 2.0) == 2.0
    assert measure_integrate(RadonMeasure.lebesgue(1.0), lambda x: 1.0 + 0 * x, 0.0, 1.0) == \
        pytest.approx(1.0, abs=1e-12)
    mu = RadonMeasure(lambda x: np.asarray(x, dtype=float), atoms=[(0.5, 1.0)])
    assert measure_integrate(mu, lambda x: x, 0.0, 1.0) == pytest.approx(5 / 6, abs=1e-12)


def test_measure_integrate_atom_at_endpoint_is_right_closed():
    mu = RadonMeasure.from_atoms([(1.0, 3.0)])
    w = lambda x: 1.0 + 0 * x
    assert measure_integrate(mu, w, 0.0, 1.0) == 3.0
    assert measure_integrate(mu, w, 1.0, 2.0) == 0.0

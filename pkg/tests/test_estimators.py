import math

import numpy as np
import pytest
from sklearn.base import clone

from iwpairs import (DiffusionSpec, Interval, ItoWatanabePair, OptimalStopper, PathTransform,
                     RadonMeasure)
from iwpairs.errors import ValidationError
from iwpairs.validation import as_points, check_lambdas, check_positive

LIN = RadonMeasure.lebesgue(2.0)
SOFT = RadonMeasure.from_atoms([(1.0, 2.0)])


def test_params_and_clone():
    est = ItoWatanabePair(measure=LIN, c=0.5, step=5e-4)
    p = est.get_params()
    assert p["c"] == 0.5 and p["step"] == 5e-4 and p["measure"] is LIN
    twin = clone(est).set_params(lambda1=2.0)
    assert twin.lambda1 == 2.0 and est.lambda1 == 1.0
    assert not hasattr(twin, "solution_")


def test_pair_fit_transform_predict():
    est = ItoWatanabePair(measure=LIN, lambda1=0.5, lambda2=0.5).fit(np.linspace(-2, 2, 5))
    X = np.array([[-1.0], [0.0], [1.5]])
    B = est.transform(X)
    assert B.shape == (3, 2)
    assert np.allclose(B[:, 0], np.exp(math.sqrt(2) * X[:, 0]), rtol=1e-6)
    assert np.allclose(est.predict(X), np.cosh(math.sqrt(2) * X[:, 0]), rtol=1e-6)


def test_pair_recovers_weights():
    X = np.linspace(-2, 2, 21)
    y = 0.3 * np.exp(math.sqrt(2) * X) + 1.7 * np.exp(-math.sqrt(2) * X)
    est = ItoWatanabePair(measure=LIN).fit(X, y)
    assert est.lambda1_ == pytest.approx(0.3, abs=1e-6)
    assert est.lambda2_ == pytest.approx(1.7, abs=1e-6)
    assert est.score(X.reshape(-1, 1), y) > 1 - 1e-10


def test_unfitted_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        ItoWatanabePair().predict([0.0])


def test_path_transform_round_trip():
    pt = PathTransform(measure=SOFT, c=1.0, a=0.5).fit()
    X = np.array([-1.0, 0.5, 2.0, 3.0])
    U = pt.transform(X)
    assert U.shape == (4, 1)
    assert U[2, 0] == pytest.approx(2.0 - 1.0 / 1.5, abs=1e-10)
    assert np.allclose(pt.inverse_transform(U)[:, 0], X, atol=1e-9)
    assert pt.limits_[1] == pytest.approx(2.0, abs=1e-10)
    assert np.allclose(pt.predict(X), 0.5 + np.maximum(X - 1, 0), atol=1e-12)


def test_path_transform_scaled_weight():
    base = PathTransform(measure=SOFT, c=1.0, a=0.5).fit()
    twice = PathTransform(measure=SOFT, c=1.0, a=0.5, lambda1=2.0).fit()
    X = np.array([0.0, 2.0])
    assert np.allclose(twice.transform(X), base.transform(X) / 4, atol=1e-12)


def test_optimal_stopper():
    st = OptimalStopper(measure=RadonMeasure.lebesgue(1.0), reward=lambda x: np.maximum(x, 0.0),
                        limits=(0.0, 0.0)).fit()
    assert st.verdict_ == "optimal"
    assert list(st.predict([0.0, 0.5, 1.5, 3.0])) == [0, 0, 1, 1]
    assert st.value([0.0])[0] == pytest.approx(math.exp(-1), abs=1e-6)
    with pytest.raises(ValidationError):
        OptimalStopper(measure=RadonMeasure.lebesgue(1.0)).fit()
    with pytest.raises(ValidationError):
        OptimalStopper(reward=lambda x: x, lambda2=0.0).fit()


def test_points_must_be_interior():
    est = ItoWatanabePair(spec=DiffusionSpec.brownian(Interval(0.0, math.inf)), measure=SOFT, c=1.0)
    with pytest.raises(ValidationError):
        est.fit([-1.0, 2.0])


# validation helpers

def test_as_points_shapes():
    assert as_points(2.0).tolist() == [2.0]
    assert as_points([[1.0], [2.0]]).tolist() == [1.0, 2.0]
    with pytest.raises(ValidationError):
        as_points([[1.0, 2.0]])
    with pytest.raises(ValidationError):
        as_points([np.nan])


def test_scalar_checks():
    assert check_positive(2, "a") == 2.0
    for bad in (0, -1, math.inf, True, "1"):
        with pytest.raises(ValidationError):
            check_positive(bad, "a")
    assert check_positive(math.inf, "h", allow_inf=True) == math.inf
    with pytest.raises(ValidationError):
        check_lambdas(0, 0)
    with pytest.raises(ValidationError):
        check_lambdas(1, 0, strict=True)
    with pytest.raises(ValidationError):
        check_lambdas(-1, 1)

"""scikit-learn style wrappers.

The estimators take a diffusion and a measure as constructor parameters and
treat X as a column of state points. fit() runs the solver and stores the
result in trailing-underscore attributes, so get_params/set_params/clone work
as usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import optimal_stopping
from .ie_solver import PairProblem, combine, solve_decreasing, solve_increasing
from .errors import ValidationError
from .transform import TransformedDiffusion
from .validation import (as_points, check_interior, check_lambdas, check_measure,
                         check_positive, check_spec)


class ItoWatanabePair(RegressorMixin, BaseEstimator):
    """Solve for (g_r, g_l) and represent g = lambda1 g_r + lambda2 g_l.

    fit(X, y) with samples of some positive solution g re-estimates the
    weights by non-negative least squares; fit() alone keeps the given ones.
    transform(X) returns the basis columns [g_r(X), g_l(X)].
    """

    def __init__(self, spec=None, measure=None, c=0.0, a=1.0, lambda1=1.0, lambda2=1.0,
                 step=1e-3, tol=1e-8):
        self.spec = spec
        self.measure = measure
        self.c = c
        self.a = a
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.step = step
        self.tol = tol

    def fit(self, X=None, y=None):
        spec = check_spec(self.spec)
        mu = check_measure(self.measure)
        c = check_interior(spec, self.c, "c")
        a = check_positive(self.a, "a")
        step = check_positive(self.step, "step")
        query = None
        if X is not None:
            xs = as_points(X, spec=spec)
            query = np.array([xs.min(), c, xs.max()])
        kw = dict(step=step, tol=check_positive(self.tol, "tol"), query=query)
        self.gr_ = solve_increasing(PairProblem(spec, mu, "increasing", c, a), **kw)
        self.gl_ = solve_decreasing(PairProblem(spec, mu, "decreasing", c, a), **kw)
        if y is not None:
            if X is None:
                raise ValidationError("y given without X", field="X")
            from scipy.optimize import nnls
            y = np.asarray(y, dtype=float).ravel()
            if y.shape != xs.shape:
                raise ValidationError("X and y lengths differ", field="y")
            B = self._basis(xs)
            lam, _ = nnls(B, y)
            self.lambda1_, self.lambda2_ = check_lambdas(*lam)
        else:
            self.lambda1_, self.lambda2_ = check_lambdas(self.lambda1, self.lambda2)
        self.solution_ = combine(self.lambda1_, self.lambda2_, self.gr_, self.gl_)
        self.n_features_in_ = 1
        return self

    def _basis(self, xs):
        return np.column_stack([np.atleast_1d(self.gr_(xs)), np.atleast_1d(self.gl_(xs))])

    def transform(self, X):
        check_is_fitted(self, "solution_")
        return self._basis(as_points(X, spec=self.solution_.spec))

    def predict(self, X):
        check_is_fitted(self, "solution_")
        return np.atleast_1d(self.solution_(as_points(X, spec=self.solution_.spec)))

    def derivative(self, X, side="left"):
        """One-sided derivative in the scale variable."""
        check_is_fitted(self, "solution_")
        return np.atleast_1d(self.solution_.derivative(as_points(X), side))


class PathTransform(TransformerMixin, BaseEstimator):
    """Map state points to the scale of the g-transformed diffusion.

    transform(X) gives s_g(X); inverse_transform undoes it. predict(X) gives
    g(X) for convenience.
    """

    def __init__(self, spec=None, measure=None, c=0.0, a=1.0, lambda1=1.0, lambda2=0.0,
                 step=1e-3):
        self.spec = spec
        self.measure = measure
        self.c = c
        self.a = a
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.step = step

    def fit(self, X=None, y=None):
        spec = check_spec(self.spec)
        mu = check_measure(self.measure)
        c = check_interior(spec, self.c, "c")
        a = check_positive(self.a, "a")
        l1, l2 = check_lambdas(self.lambda1, self.lambda2)
        step = check_positive(self.step, "step")
        parts = []
        if l1 > 0:
            parts.append(solve_increasing(PairProblem(spec, mu, "increasing", c, a), step=step))
        if l2 > 0:
            parts.append(solve_decreasing(PairProblem(spec, mu, "decreasing", c, a), step=step))
        if len(parts) == 2:
            g = combine(l1, l2, *parts)
        else:
            g = parts[0].with_values(parts[0].g * (l1 or l2), parts[0].p_minus * (l1 or l2),
                                     parts[0].p_plus * (l1 or l2)) if (l1 or l2) != 1.0 else parts[0]
        self.g_ = g
        self.td_ = TransformedDiffusion(spec, g)
        self.limits_ = (self.td_.u_l, self.td_.u_r)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "td_")
        xs = as_points(X, spec=self.td_.base)
        return np.atleast_1d(self.td_.s_g(xs)).reshape(-1, 1)

    def inverse_transform(self, U):
        check_is_fitted(self, "td_")
        u = as_points(U, name="U")
        return np.atleast_1d(self.td_.inverse(u)).reshape(-1, 1)

    def predict(self, X):
        check_is_fitted(self, "td_")
        return np.atleast_1d(self.td_.g_of_x(as_points(X, spec=self.td_.base), extrapolate=True))


class OptimalStopper(BaseEstimator):
    """Perpetual discounted stopping of reward(X_t) with discount exp(-A_t).

    predict(X) is 1 where stopping at once is optimal and 0 otherwise;
    decision_function(X) gives the value V(X).
    """

    def __init__(self, spec=None, measure=None, reward=None, limits="auto", lambda1=0.5,
                 lambda2=0.5, c=0.0, step=1e-3):
        self.spec = spec
        self.measure = measure
        self.reward = reward
        self.limits = limits
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.c = c
        self.step = step

    def fit(self, X=None, y=None):
        spec = check_spec(self.spec)
        mu = check_measure(self.measure)
        if self.reward is None:
            raise ValidationError("a reward function is required", field="reward")
        reward = self.reward
        if not isinstance(reward, optimal_stopping.RewardSpec):
            if not callable(reward):
                raise ValidationError("reward must be callable", field="reward")
            reward = optimal_stopping.RewardSpec(reward, self.limits)
        l1, l2 = check_lambdas(self.lambda1, self.lambda2, strict=True)
        self.solution_ = optimal_stopping.solve(spec, mu, reward, l1, l2,
                                                c=check_interior(spec, self.c, "c"),
                                                step=check_positive(self.step, "step"))
        self.stopping_region_ = list(self.solution_.region)
        self.verdict_ = self.solution_.verdict
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "solution_")
        xs = as_points(X, spec=self.solution_.td.base)
        return np.atleast_1d(optimal_stopping.stopping_indicator(self.solution_, xs)).astype(int)

    def decision_function(self, X):
        check_is_fitted(self, "solution_")
        return np.atleast_1d(self.solution_.value(as_points(X, spec=self.solution_.td.base)))

    value = decision_function

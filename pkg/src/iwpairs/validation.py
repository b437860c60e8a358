"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import math
import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .diffusion_core import DiffusionSpec, RadonMeasure
from .errors import ValidationError


def as_points(X, name="X", spec=None):
    """1-d float array from a scalar, a sequence or an (n, 1) array.

    With `spec` the points must lie strictly inside the state interval.
    """
    if np.isscalar(X):
        X = [X]
    try:
        arr = check_array(np.asarray(X, dtype=float).reshape(-1, 1) if np.ndim(X) <= 1 else X,
                          ensure_2d=True, dtype=float, ensure_all_finite=True)
    except ValueError as exc:
        raise ValidationError(str(exc), field=name) from None
    if arr.shape[1] != 1:
        raise ValidationError(f"{name} must have a single feature column, got {arr.shape[1]}", field=name)
    x = arr[:, 0]
    if spec is not None:
        spec.interval.check_interior(x, name)
    return x


def check_positive(value, name, allow_inf=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ValidationError(f"{name} must be a real number", field=name)
    v = float(value)
    if not v > 0 or (math.isinf(v) and not allow_inf):
        raise ValidationError(f"{name} must be positive{'' if allow_inf else ' and finite'}", field=name)
    return v


def check_lambdas(lambda1, lambda2, strict=False):
    """Mixture weights of g = lambda1 g_r + lambda2 g_l."""
    out = []
    for name, v in (("lambda1", lambda1), ("lambda2", lambda2)):
        if isinstance(v, bool) or not isinstance(v, numbers.Real) or not math.isfinite(v):
            raise ValidationError(f"{name} must be a finite real number", field=name)
        if v < 0 or (strict and v == 0):
            raise ValidationError(f"{name} must be {'positive' if strict else 'non-negative'}", field=name)
        out.append(float(v))
    if not out[0] + out[1] > 0:
        raise ValidationError("lambda1 and lambda2 cannot both vanish", field="lambda1")
    return tuple(out)


def check_spec(spec):
    if spec is None:
        return DiffusionSpec.brownian()
    if not isinstance(spec, DiffusionSpec):
        raise ValidationError("spec must be a DiffusionSpec", field="spec")
    return spec


def check_measure(mu):
    if mu is None:
        return RadonMeasure.zero()
    if not isinstance(mu, RadonMeasure):
        raise ValidationError("measure must be a RadonMeasure", field="measure")
    return mu


def check_interior(spec, x, name):
    spec.interval.check_interior(x, name)
    return float(x)

"""Small input-validation helpers used across the estimators.

These mirror the sklearn ``check_array`` idiom but raise kernseg's own
exception types and keep the rules we actually need (finite floats,
fixed dimensionality) explicit.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, InputError


def as_float_matrix(X, name: str, *, allow_empty: bool = False) -> np.ndarray:
    """Coerce ``X`` to a finite 2-D float64 array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[0] == 0 and not allow_empty:
        raise InputError(f"{name} must have at least one row")
    if X.size and not np.isfinite(X).all():
        raise InputError(f"{name} contains NaN or Inf")
    return X


def as_float_vector(y, name: str, *, length: int | None = None) -> np.ndarray:
    """Coerce ``y`` to a finite 1-D float64 array, optionally of fixed length."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if length is not None and y.shape[0] != length:
        raise InputError(f"{name} has length {y.shape[0]}, expected {length}")
    if y.size and not np.isfinite(y).all():
        raise InputError(f"{name} contains NaN or Inf")
    return y


def as_signed_labels(y, name: str, *, length: int) -> np.ndarray:
    """Validate a vector of +1/-1 labels."""
    y = as_float_vector(y, name, length=length)
    if not np.isin(y, (-1.0, 1.0)).all():
        raise InputError(f"{name} must contain only +1/-1 labels")
    return y


def check_positive(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ConfigError(f"{name} must be a positive finite number, got {value}")
    return value


def check_count(value, name: str, *, minimum: int = 1) -> int:
    count = int(value)
    if count != value or count < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value}")
    return count


def check_same_features(X: np.ndarray, expected: int, name: str) -> None:
    if X.shape[1] != expected:
        raise InputError(
            f"{name} has {X.shape[1]} features, expected {expected}"
        )

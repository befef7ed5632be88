"""Regularized least squares for bounding-box refinement.

Maps region features to the four box-delta targets (center offsets and
log size ratios). A constant-one column provides the intercept, which is
left out of the ridge penalty so that heavy regularization collapses
predictions onto the column means instead of zero.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from sklearn.base import BaseEstimator, RegressorMixin

from .exceptions import InputError, NumericalError
from .validation import as_float_matrix, check_positive, check_same_features

N_TARGETS = 4


class RidgeBoxRegressor(RegressorMixin, BaseEstimator):
    """Ridge regression onto exactly four box-delta targets.

    Minimizes ||X W - T||^2 + lam ||W||^2 with the bias row of W
    unpenalized. ``weights_`` has shape (d + 1, 4); the last row is the
    intercept.
    """

    def __init__(self, lam: float = 1e-3):
        self.lam = lam

    def fit(self, X, T):
        lam = check_positive(self.lam, "lam")
        X = as_float_matrix(X, "X")
        T = as_float_matrix(T, "T", allow_empty=True)
        if T.shape != (X.shape[0], N_TARGETS):
            raise InputError(
                f"T must have shape ({X.shape[0]}, {N_TARGETS}), got {T.shape}"
            )
        n, d = X.shape
        Xa = np.hstack([X, np.ones((n, 1))])
        gram = Xa.T @ Xa
        penalty = lam * np.eye(d + 1)
        penalty[d, d] = 0.0  # free intercept
        try:
            self.weights_ = scipy.linalg.solve(gram + penalty, Xa.T @ T, assume_a="pos")
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError(f"ridge system is singular: {exc}") from exc
        self.n_features_in_ = d
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "weights_"):
            raise InputError("regressor is not fitted")
        X = as_float_matrix(X, "X", allow_empty=True)
        check_same_features(X, self.n_features_in_, "X")
        return X @ self.weights_[:-1] + self.weights_[-1]

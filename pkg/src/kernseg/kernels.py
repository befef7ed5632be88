"""Gaussian kernel evaluation.

Distances are computed with ``scipy.spatial.distance.cdist`` rather than
the usual Gram-matrix expansion: cdist sums squared per-coordinate
differences, so equal rows give a distance of exactly zero, swapped
arguments give the exact transpose, and self-kernels carry an exact unit
diagonal. Those exactness properties matter downstream (Cholesky of the
center Gram matrix, kernel-entry bound checks) and the speed difference
is negligible at the matrix sizes this package handles.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import InputError
from .validation import as_float_matrix, check_positive


def gaussian_kernel(X, C, sigma: float) -> np.ndarray:
    """Evaluate exp(-||x_i - c_j||^2 / (2 sigma^2)) for all row pairs.

    Parameters
    ----------
    X : array of shape (n, d)
    C : array of shape (m, d)
    sigma : positive kernel width

    Returns
    -------
    array of shape (n, m) with entries in (0, 1].
    """
    sigma = check_positive(sigma, "sigma")
    X = as_float_matrix(X, "X", allow_empty=True)
    C = as_float_matrix(C, "C", allow_empty=True)
    if X.shape[1] != C.shape[1]:
        raise InputError(
            f"X has {X.shape[1]} columns but C has {C.shape[1]}"
        )
    if X.shape[0] == 0 or C.shape[0] == 0:
        return np.zeros((X.shape[0], C.shape[0]))
    d2 = cdist(X, C, "sqeuclidean")
    return np.exp(d2 * (-0.5 / (sigma * sigma)))

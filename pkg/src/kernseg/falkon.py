"""Nystrom kernel ridge classification with a preconditioned iterative solver.

``FalkonClassifier`` fits the Nystrom-approximated kernel ridge system

    (K_nm^T K_nm + lambda * n * K_mm) alpha = K_nm^T y

where the m rows of the center matrix are sampled uniformly without
replacement from the training set. The system is solved by conjugate
gradient preconditioned with two triangular factors: T from the Cholesky
of K_mm and A from the Cholesky of (T T^T / m + lambda I). Writing
B = T^-1 A^-1, CG runs on B^T H B with H = K_nm^T K_nm / n + lambda K_mm,
which is well conditioned because T^T A^T A T reproduces H when the
centers are representative of the data.

``exact_nystrom_krr`` solves the same system by direct factorization and
exists purely as a reference for convergence tests; keep it away from
large problems.

Solver internals run in float64. Fitted centers are stored as float32 so
that serialization (see ``FalkonClassifier.save``) is lossless and a
round trip reproduces scores bit for bit.
"""

from __future__ import annotations

import io
import struct

import numpy as np
import scipy.linalg

from sklearn.base import BaseEstimator, ClassifierMixin

from .exceptions import InputError, NumericalError
from .kernels import gaussian_kernel
from .validation import (
    as_float_matrix,
    as_float_vector,
    as_signed_labels,
    check_count,
    check_positive,
    check_same_features,
)

_MAGIC = b"FKN1"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIdd")

# Cholesky jitter schedule: relative to mean diagonal, escalated tenfold.
_JITTER_START = 1e-10
_JITTER_ESCALATIONS = 5


def _cholesky_with_jitter(mat: np.ndarray, name: str) -> np.ndarray:
    """Upper Cholesky factor of ``mat`` with escalating diagonal jitter.

    Centers drawn from finite data are frequently duplicated, which makes
    the Gram matrix rank deficient; a small ridge restores definiteness.
    """
    m = mat.shape[0]
    scale = float(np.trace(mat)) / m
    if scale <= 0.0 or not np.isfinite(scale):
        scale = 1.0
    jitter = _JITTER_START * scale
    eye = np.eye(m)
    for _ in range(_JITTER_ESCALATIONS + 1):
        try:
            return scipy.linalg.cholesky(mat + jitter * eye, lower=False)
        except scipy.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(
        f"Cholesky of {name} ({m}x{m}) failed even with jitter "
        f"{jitter / 10.0:.3e}; matrix is too ill conditioned"
    )


def _canonical_row_order(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort (row, label) pairs by their raw bytes; any fixed total order works."""
    combined = np.ascontiguousarray(np.column_stack([X, y]))
    width = combined.dtype.itemsize * combined.shape[1]
    keys = combined.view(np.dtype((np.void, width))).ravel()
    order = np.argsort(keys, kind="stable")
    return X[order], y[order]


def _conjugate_gradient(matvec, b: np.ndarray, max_iter: int, tol: float):
    """Plain CG on a symmetric positive definite operator.

    Returns (solution, iterations_run). Stops early when the residual
    norm drops below ``tol`` times the initial norm, or when the
    curvature term hits the numerical floor.
    """
    x = np.zeros_like(b)
    r = b.copy()
    rs = float(r @ r)
    b_norm = np.sqrt(rs)
    if b_norm == 0.0:
        return x, 0
    p = r.copy()
    iterations = 0
    for _ in range(max_iter):
        Ap = matvec(p)
        denom = float(p @ Ap)
        if denom <= 0.0 or not np.isfinite(denom):
            break
        step = rs / denom
        x += step * p
        r -= step * Ap
        iterations += 1
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * b_norm:
            break
        p *= rs_new / rs
        p += r
        rs = rs_new
    return x, iterations


class FalkonClassifier(ClassifierMixin, BaseEstimator):
    """Binary kernel classifier trained on +1/-1 labels.

    Parameters
    ----------
    sigma : float
        Gaussian kernel width.
    lam : float
        Ridge regularization strength.
    n_centers : int
        Number of Nystrom centers m; capped at n when the training set is
        smaller.
    max_iter : int
        Iteration cap for the preconditioned conjugate gradient.
    tol : float
        Relative residual at which CG stops early.
    seed : int
        Seed for center sampling. Fitting is deterministic given the seed.
    centers : array of shape (m, d), optional
        Explicit center matrix; skips sampling when provided.
    block_size : int
        Row-block size used when accumulating the kernel normal equations.
    """

    def __init__(
        self,
        sigma: float = 5.0,
        lam: float = 1e-6,
        n_centers: int = 1000,
        max_iter: int = 20,
        tol: float = 1e-10,
        seed: int = 0,
        centers=None,
        block_size: int = 8192,
    ):
        self.sigma = sigma
        self.lam = lam
        self.n_centers = n_centers
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed
        self.centers = centers
        self.block_size = block_size

    def fit(self, X, y):
        sigma = check_positive(self.sigma, "sigma")
        lam = check_positive(self.lam, "lam")
        check_count(self.n_centers, "n_centers")
        check_count(self.max_iter, "max_iter")
        X = as_float_matrix(X, "X")
        n, d = X.shape
        y = as_signed_labels(y, "y", length=n)

        if self.centers is not None:
            centers = as_float_matrix(self.centers, "centers")
            check_same_features(centers, d, "centers")
        else:
            m = min(int(self.n_centers), n)
            rng = np.random.default_rng(self.seed)
            idx = np.sort(rng.choice(n, size=m, replace=False))
            centers = X[idx]
        self.centers_ = np.ascontiguousarray(centers, dtype=np.float32)

        C = self.centers_.astype(np.float64)
        m = C.shape[0]
        Kmm = gaussian_kernel(C, C, sigma)

        # Rows go into a canonical byte order first: the normal equations
        # then accumulate in an order independent of how the caller sorted
        # the training set, so permuting rows cannot perturb alpha even
        # when the system is ill conditioned.
        X, y = _canonical_row_order(X, y)

        # Normal equations accumulated blockwise so K_nm never needs to be
        # held whole: G = K_nm^T K_nm, rhs0 = K_nm^T y.
        G = np.zeros((m, m))
        rhs0 = np.zeros(m)
        block = max(int(self.block_size), 1)
        for start in range(0, n, block):
            Kb = gaussian_kernel(X[start : start + block], C, sigma)
            G += Kb.T @ Kb
            rhs0 += Kb.T @ y[start : start + block]

        T = _cholesky_with_jitter(Kmm, "K_mm")
        A = _cholesky_with_jitter(T @ T.T / m + lam * np.eye(m), "preconditioner Gram")

        def b_mul(v):
            v = scipy.linalg.solve_triangular(A, v, lower=False)
            return scipy.linalg.solve_triangular(T, v, lower=False)

        def bt_mul(v):
            v = scipy.linalg.solve_triangular(T, v, trans="T", lower=False)
            return scipy.linalg.solve_triangular(A, v, trans="T", lower=False)

        def w_mul(beta):
            v = b_mul(beta)
            h = G @ v / n + lam * (Kmm @ v)
            return bt_mul(h)

        rhs = bt_mul(rhs0 / n)
        beta, iterations = _conjugate_gradient(w_mul, rhs, int(self.max_iter), float(self.tol))
        self.alpha_ = b_mul(beta)
        self.iterations_run_ = iterations
        self.n_features_in_ = d
        self.classes_ = np.array([-1.0, 1.0])
        return self

    def decision_function(self, X) -> np.ndarray:
        """Kernel expansion scores sum_j alpha_j k(x, center_j); no threshold."""
        if not hasattr(self, "alpha_"):
            raise InputError("classifier is not fitted")
        X = as_float_matrix(X, "X", allow_empty=True)
        check_same_features(X, self.n_features_in_, "X")
        if X.shape[0] == 0:
            return np.zeros(0)
        K = gaussian_kernel(X, self.centers_.astype(np.float64), self.sigma)
        return K @ self.alpha_

    def predict(self, X) -> np.ndarray:
        """Sign of the decision function, with ties going to +1."""
        scores = self.decision_function(X)
        return np.where(scores >= 0.0, 1.0, -1.0)

    # -- serialization ---------------------------------------------------

    def save(self, path) -> None:
        """Write the fitted model as a versioned little-endian binary blob."""
        if not hasattr(self, "alpha_"):
            raise InputError("cannot save an unfitted classifier")
        with open(path, "wb") as fh:
            fh.write(self._to_bytes())

    def _to_bytes(self) -> bytes:
        m, d = self.centers_.shape
        buf = io.BytesIO()
        buf.write(
            _HEADER.pack(
                _MAGIC,
                _FORMAT_VERSION,
                m,
                d,
                int(self.iterations_run_),
                float(self.sigma),
                float(self.lam),
            )
        )
        buf.write(self.alpha_.astype("<f8").tobytes())
        buf.write(self.centers_.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def load(cls, path) -> "FalkonClassifier":
        with open(path, "rb") as fh:
            return cls._from_bytes(fh.read(), str(path))

    @classmethod
    def _from_bytes(cls, blob: bytes, origin: str = "<bytes>") -> "FalkonClassifier":
        if len(blob) < _HEADER.size:
            raise NumericalError(f"{origin}: truncated model blob")
        magic, version, m, d, iterations, sigma, lam = _HEADER.unpack_from(blob)
        if magic != _MAGIC:
            raise NumericalError(f"{origin}: bad magic {magic!r}, expected {_MAGIC!r}")
        if version != _FORMAT_VERSION:
            raise NumericalError(f"{origin}: unsupported model version {version}")
        expected = _HEADER.size + 8 * m + 4 * m * d
        if len(blob) != expected:
            raise NumericalError(
                f"{origin}: model blob has {len(blob)} bytes, expected {expected}"
            )
        offset = _HEADER.size
        alpha = np.frombuffer(blob, dtype="<f8", count=m, offset=offset).copy()
        offset += 8 * m
        centers = (
            np.frombuffer(blob, dtype="<f4", count=m * d, offset=offset)
            .reshape(m, d)
            .copy()
        )
        model = cls(sigma=float(sigma), lam=float(lam), n_centers=m)
        model.alpha_ = alpha
        model.centers_ = centers
        model.iterations_run_ = int(iterations)
        model.n_features_in_ = d
        return model


def exact_nystrom_krr(X, y, centers, sigma: float, lam: float) -> np.ndarray:
    """Direct factorization solve of the Nystrom kernel ridge system.

    Reference implementation for convergence tests; cost is O(n m^2 + m^3)
    with dense matrices, so keep n small.
    """
    sigma = check_positive(sigma, "sigma")
    X = as_float_matrix(X, "X")
    centers = as_float_matrix(centers, "centers")
    check_same_features(centers, X.shape[1], "centers")
    n = X.shape[0]
    y = as_float_vector(y, "y", length=n)
    if lam < 0 or not np.isfinite(lam):
        raise InputError(f"lam must be >= 0, got {lam}")

    Knm = gaussian_kernel(X, centers, sigma)
    Kmm = gaussian_kernel(centers, centers, sigma)
    lhs = Knm.T @ Knm + lam * n * Kmm
    rhs = Knm.T @ y
    try:
        alpha = scipy.linalg.solve(lhs, rhs, assume_a="pos")
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"direct Nystrom solve failed: {exc}") from exc
    if not np.isfinite(alpha).all():
        raise NumericalError("direct Nystrom solve produced non-finite coefficients")
    return alpha

import numpy as np
import pytest

from kernseg import ConfigError, InputError, gaussian_kernel


def scalar_loop_kernel(X, C, sigma):
    """Entrywise oracle: direct formula evaluation, one pair at a time."""
    K = np.zeros((len(X), len(C)))
    for i, x in enumerate(X):
        for j, c in enumerate(C):
            K[i, j] = np.exp(-float(np.sum((x - c) ** 2)) / (2.0 * sigma**2))
    return K


def test_zero_distance_gives_exact_one(rng):
    C = rng.normal(size=(4, 3))
    X = np.vstack([C[2], rng.normal(size=(2, 3))])
    K = gaussian_kernel(X, C, sigma=0.7)
    assert K[0, 2] == 1.0


def test_swapped_arguments_transpose(rng):
    X = rng.normal(size=(5, 4))
    C = rng.normal(size=(3, 4))
    K = gaussian_kernel(X, C, 2.0)
    assert np.array_equal(K.T, gaussian_kernel(C, X, 2.0))


def test_matches_scalar_loop_oracle(rng):
    X = rng.normal(size=(5, 3))
    C = rng.normal(size=(4, 3))
    for sigma in (0.5, 1.0, 3.7):
        K = gaussian_kernel(X, C, sigma)
        np.testing.assert_allclose(K, scalar_loop_kernel(X, C, sigma), atol=1e-12)


def test_entries_bounded_and_diag_one(rng):
    C = rng.normal(size=(30, 6))
    K = gaussian_kernel(C, C, 1.3)
    assert (K > 0).all() and (K <= 1).all()
    assert np.array_equal(np.diag(K), np.ones(30))


def test_dimension_mismatch_rejected(rng):
    with pytest.raises(InputError):
        gaussian_kernel(rng.normal(size=(3, 4)), rng.normal(size=(3, 5)), 1.0)


def test_bad_sigma_rejected(rng):
    X = rng.normal(size=(2, 2))
    for sigma in (0.0, -1.0, np.nan):
        with pytest.raises(ConfigError):
            gaussian_kernel(X, X, sigma)


def test_nonfinite_input_rejected():
    X = np.array([[1.0, np.inf]])
    with pytest.raises(InputError):
        gaussian_kernel(X, np.ones((1, 2)), 1.0)


def test_empty_inputs():
    K = gaussian_kernel(np.zeros((0, 3)), np.ones((2, 3)), 1.0)
    assert K.shape == (0, 2)

"""Small-matrix kernel contracts: log-determinants, inverses, SVD."""

import numpy as np
import pytest

from helpers import random_spd

from hfmca import linalg


def test_logdet_identity():
    assert linalg.cholesky_logdet(np.eye(2), 0.0) == 0.0


def test_logdet_diagonal():
    assert abs(linalg.cholesky_logdet(np.diag([2.0, 3.0]), 0.0) - np.log(6.0)) < 1e-12


def test_logdet_ridged_rank_deficient():
    m = np.ones((2, 2))
    expected = np.log(1.1**2 - 1.0)
    assert abs(linalg.cholesky_logdet(m, 0.1) - expected) < 1e-12
    assert abs(expected - np.log(0.21)) < 1e-12


def test_logdet_failure_signals():
    with pytest.raises(linalg.LinalgError):
        linalg.cholesky_logdet(np.diag([1.0, -1.0]), 0.0)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_logdet_matches_direct_determinant(k):
    rng = np.random.default_rng(k)
    for _ in range(20):
        m = random_spd(rng, k)
        lam = rng.uniform(0.0, 0.5)
        direct = np.log(np.linalg.det(m + lam * np.eye(k)))
        assert abs(linalg.cholesky_logdet(m, lam) - direct) < 1e-10


def test_ridge_inverse_examples():
    assert np.allclose(linalg.ridge_inverse(np.eye(3), 0.0), np.eye(3), atol=1e-14)
    assert np.allclose(linalg.ridge_inverse(np.diag([4.0]), 1.0), np.diag([0.2]), atol=1e-14)


def test_ridge_inverse_residual():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = random_spd(rng, 5)
        lam = rng.uniform(0.0, 0.3)
        inv = linalg.ridge_inverse(m, lam)
        resid = (m + lam * np.eye(5)) @ inv - np.eye(5)
        assert np.abs(resid).max() <= 1e-8
        assert np.abs(inv - inv.T).max() <= 1e-12


def test_inv_sqrt_examples():
    assert np.allclose(linalg.inv_sqrt_sym(np.eye(2), 0.0), np.eye(2), atol=1e-12)
    got = linalg.inv_sqrt_sym(np.diag([4.0, 9.0]), 0.0)
    assert np.allclose(got, np.diag([0.5, 1.0 / 3.0]), atol=1e-12)


def test_inv_sqrt_residual_and_commutation():
    rng = np.random.default_rng(1)
    for _ in range(10):
        m = random_spd(rng, 6)
        lam = rng.uniform(0.0, 0.2)
        s = linalg.inv_sqrt_sym(m, lam)
        ridged = m * 0.5 + m.T * 0.5 + lam * np.eye(6)
        assert np.abs(s @ ridged @ s - np.eye(6)).max() <= 1e-8
        assert np.abs(s @ ridged - ridged @ s).max() <= 1e-8
        assert np.abs(s - s.T).max() <= 1e-12


def test_inv_sqrt_failure():
    with pytest.raises(linalg.LinalgError):
        linalg.inv_sqrt_sym(np.diag([1.0, -0.5]), 0.0)


def test_svd_examples():
    res = linalg.svd_small(np.eye(3))
    assert np.allclose(res.singular_values, np.ones(3), atol=1e-12)
    res = linalg.svd_small(np.diag([3.0, -2.0]))
    assert np.allclose(res.singular_values, [3.0, 2.0], atol=1e-12)
    res = linalg.svd_small(np.array([[0.8, 0.2], [0.2, 0.8]]))
    assert np.allclose(res.singular_values, [1.0, 0.6], atol=1e-12)


@pytest.mark.parametrize("k", [2, 5, 16, 64])
def test_svd_reconstruction_and_orthogonality(k):
    rng = np.random.default_rng(k)
    m = rng.standard_normal((k, k))
    res = linalg.svd_small(m)
    assert np.abs(res.reconstruct() - m).max() <= 1e-8
    assert np.abs(res.u.T @ res.u - np.eye(k)).max() <= 1e-10
    assert np.abs(res.v.T @ res.v - np.eye(k)).max() <= 1e-10
    assert (np.diff(res.singular_values) <= 1e-12).all()
    assert (res.singular_values >= 0).all()


def test_svd_rejects_bad_input():
    with pytest.raises(linalg.LinalgError):
        linalg.svd_small(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(linalg.LinalgError):
        linalg.svd_small(np.zeros((2, 3)))

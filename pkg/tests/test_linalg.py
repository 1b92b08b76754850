import numpy as np
import pytest

from ccdm.numerics import Rng, gaussian_fit, sqrtm_psd, svd


def reconstruction_error(w, u, s, v):
    return np.linalg.norm(u @ np.diag(s) @ v.T - w) / max(1.0, np.linalg.norm(w))


class TestSvd:
    def test_identity(self):
        u, s, v = svd(np.eye(2))
        assert np.allclose(s, [1.0, 1.0])

    def test_diagonal(self):
        w = np.diag([3.0, 2.0])
        u, s, v = svd(w)
        assert np.allclose(s, [3.0, 2.0])
        # singular vectors are signed permutations
        assert np.allclose(np.abs(u), np.eye(2), atol=1e-10)
        assert np.allclose(np.abs(v), np.eye(2), atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_square_reconstruction(self, seed):
        w = Rng(seed, "svd").normal((8, 8)).astype(np.float64)
        u, s, v = svd(w)
        assert reconstruction_error(w, u, s, v) <= 1e-5
        assert np.linalg.norm(u.T @ u - np.eye(8)) <= 1e-5
        assert np.linalg.norm(v.T @ v - np.eye(8)) <= 1e-5

    def test_rectangular_both_orientations(self):
        for shape in [(6, 3), (3, 6)]:
            w = Rng(7, "rect").normal(shape).astype(np.float64)
            u, s, v = svd(w)
            k = min(shape)
            assert u.shape == (shape[0], k) and v.shape == (shape[1], k)
            assert reconstruction_error(w, u, s, v) <= 1e-5

    def test_singular_values_sorted_descending(self):
        w = Rng(3, "sort").normal((10, 10)).astype(np.float64)
        _, s, _ = svd(w)
        assert np.all(np.diff(s) <= 1e-12)
        assert np.all(s >= 0)

    def test_invariant_under_row_permutation(self):
        w = Rng(4, "perm").normal((7, 7)).astype(np.float64)
        _, s1, _ = svd(w)
        _, s2, _ = svd(w[::-1])
        assert np.allclose(s1, s2, atol=1e-9)

    def test_rank_deficient(self):
        w = np.outer(np.arange(1.0, 6.0), np.ones(4))
        u, s, v = svd(w)
        assert reconstruction_error(w, u, s, v) <= 1e-5
        assert np.linalg.norm(u.T @ u - np.eye(4)) <= 1e-5
        assert (s[1:] <= 1e-10).all()

    def test_nonfinite_input_is_an_error(self):
        with pytest.raises(ValueError):
            svd(np.array([[1.0, np.inf], [0.0, 1.0]]))

    def test_weight_sized_matrices(self):
        for shape in [(64, 64), (64, 384), (16, 64)]:
            w = Rng(shape[0] * 1000 + shape[1], "wsz").normal(shape).astype(np.float64)
            u, s, v = svd(w)
            assert reconstruction_error(w, u, s, v) <= 1e-5


class TestSqrtmPsd:
    def test_identity(self):
        assert np.allclose(sqrtm_psd(np.eye(4)), np.eye(4), atol=1e-12)

    def test_diagonal(self):
        assert np.allclose(sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    @pytest.mark.parametrize("seed", range(5))
    def test_square_back(self, seed):
        b0 = Rng(seed, "sqrtm").normal((6, 6)).astype(np.float64)
        a = b0 @ b0.T
        b = sqrtm_psd(a)
        assert np.linalg.norm(b @ b - a) <= 1e-4 * max(1.0, np.linalg.norm(a))
        assert np.allclose(b, b.T)
        assert np.linalg.eigvalsh(b).min() >= -1e-10

    def test_asymmetry_is_an_error(self):
        a = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            sqrtm_psd(a)

    def test_negative_eigenvalue_is_an_error(self):
        a = np.diag([1.0, -0.1])
        with pytest.raises(ValueError, match="PSD"):
            sqrtm_psd(a)

    def test_roundoff_negatives_are_clamped(self):
        a = np.diag([1.0, -1e-8])
        b = sqrtm_psd(a)
        assert np.allclose(b, np.diag([1.0, 0.0]), atol=1e-7)


class TestGaussianFit:
    def test_two_points(self):
        mu, cov = gaussian_fit(np.array([[0.0, 0.0], [2.0, 2.0]]))
        assert np.allclose(mu, [1.0, 1.0])
        assert np.allclose(cov, [[2.0, 2.0], [2.0, 2.0]])

    def test_identical_rows_give_zero_covariance(self):
        x = np.tile([1.5, -0.5, 3.0], (10, 1))
        _, cov = gaussian_fit(x)
        assert np.allclose(cov, 0.0)

    def test_standard_normal_sampling(self):
        x = Rng(0, "gfit").normal((1000, 4)).astype(np.float64)
        mu, cov = gaussian_fit(x)
        assert np.abs(mu).max() < 0.15
        assert np.abs(cov - np.eye(4)).max() < 0.25

    def test_too_few_samples_is_an_error(self):
        with pytest.raises(ValueError):
            gaussian_fit(np.zeros((1, 3)))

    def test_covariance_is_symmetric(self):
        x = Rng(1, "sym").normal((50, 6)).astype(np.float64)
        _, cov = gaussian_fit(x)
        assert np.array_equal(cov, cov.T)

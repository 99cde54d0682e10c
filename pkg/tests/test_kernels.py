import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svmllab.kernels import KernelMatrix, add_ridge, kernel_matrix, kernel_value
from svmllab.metrics import LinearMetric, default_metric


class TestKernelValue:
    def test_zero_distance_gives_one(self, rng):
        m = default_metric("full", 3)
        x = rng.normal(size=3)
        assert kernel_value(m, x, x) == 1.0

    def test_log_two_distance_gives_half(self):
        # distance_sq = ln 2  =>  exp(-ln 2) = 0.5
        gap = np.sqrt(np.log(2.0))
        m = LinearMetric.full(np.eye(1))
        assert kernel_value(m, [gap], [0.0]) == pytest.approx(0.5, rel=1e-14)

    def test_sphere_heuristic_matches_euclidean_rbf(self, rng):
        # 1/sigma = 1/sqrt(d) reproduces exp(-||x-x'||^2 / d)
        d = 6
        m = default_metric("sphere", d)
        x, z = rng.normal(size=d), rng.normal(size=d)
        expected = np.exp(-np.sum((x - z) ** 2) / d)
        assert kernel_value(m, x, z) == pytest.approx(expected, rel=1e-12)

    def test_dimension_mismatch(self):
        m = default_metric("full", 2)
        with pytest.raises(ValueError):
            kernel_value(m, [1.0, 2.0, 3.0], [0.0, 0.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rotation_invariance_of_spherical_kernel(self, seed):
        rng = np.random.default_rng(seed)
        m = LinearMetric.spherical(0.8, d=3)
        x, z = rng.normal(size=3), rng.normal(size=3)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        assert kernel_value(m, q @ x, q @ z) == pytest.approx(kernel_value(m, x, z), rel=1e-10)


class TestKernelMatrix:
    def test_square_symmetric_unit_diagonal(self, rng):
        m = default_metric("full", 2)
        A = rng.normal(size=(3, 2))
        K = kernel_matrix(m, A).values
        assert np.array_equal(K, K.T)
        assert np.array_equal(np.diag(K), np.ones(3))

    def test_cross_shape(self, rng):
        m = default_metric("sphere", 2)
        K = kernel_matrix(m, rng.normal(size=(5, 2)), rng.normal(size=(3, 2)))
        assert K.shape == (5, 3)
        assert K.ridge_c is None

    def test_matches_scalar_oracle(self, rng):
        m = LinearMetric.full(rng.normal(size=(2, 2)))
        A = rng.normal(size=(5, 2))
        B = rng.normal(size=(4, 2))
        K = kernel_matrix(m, A, B).values
        for i in range(5):
            for j in range(4):
                assert K[i, j] == pytest.approx(kernel_value(m, A[i], B[j]), rel=1e-12)

    def test_entries_in_unit_interval(self, rng):
        m = LinearMetric.full(rng.normal(size=(3, 3)))
        K = kernel_matrix(m, rng.normal(size=(6, 3))).values
        assert np.all(K > 0.0) and np.all(K <= 1.0)

    def test_square_psd(self, rng):
        m = LinearMetric.full(rng.normal(size=(3, 3)))
        K = kernel_matrix(m, rng.normal(size=(8, 3))).values
        assert np.linalg.eigvalsh(K).min() >= -1e-10


class TestAddRidge:
    def test_diagonal_shift(self, rng):
        m = default_metric("full", 2)
        K = kernel_matrix(m, rng.normal(size=(4, 2)))
        R = add_ridge(K, 10.0)
        assert np.allclose(np.diag(R.values), 1.1, atol=1e-15)
        off = ~np.eye(4, dtype=bool)
        assert np.array_equal(R.values[off], K.values[off])
        assert R.ridge_c == 10.0

    def test_huge_c_approaches_hard_margin(self, rng):
        m = default_metric("full", 2)
        K = kernel_matrix(m, rng.normal(size=(4, 2)))
        R = add_ridge(K, 1e12)
        # the diagonal moves by exactly 1/C; 1 + 1e-12 rounds to ~1.0000889e-12 away
        assert np.max(np.abs(R.values - K.values)) <= 1.1e-12

    def test_eigenvalue_shift_oracle(self, rng):
        m = LinearMetric.full(rng.normal(size=(3, 3)))
        K = kernel_matrix(m, rng.normal(size=(6, 3)))
        C = 3.0
        shifted = np.linalg.eigvalsh(add_ridge(K, C).values)
        expected = np.linalg.eigvalsh(K.values) + 1.0 / C
        assert np.allclose(shifted, expected, atol=1e-10)

    def test_ridged_matrix_strictly_pd(self, rng):
        m = LinearMetric.rectangular(rng.normal(size=(1, 3)))  # singular metric
        K = kernel_matrix(m, rng.normal(size=(7, 3)))
        C = 5.0
        assert np.linalg.eigvalsh(add_ridge(K, C).values).min() >= 1.0 / C - 1e-10

    def test_double_ridge_rejected(self, rng):
        K = kernel_matrix(default_metric("full", 2), rng.normal(size=(3, 2)))
        R = add_ridge(K, 1.0)
        with pytest.raises(ValueError):
            add_ridge(R, 1.0)

    def test_invalid_inputs(self, rng):
        K = kernel_matrix(default_metric("full", 2), rng.normal(size=(3, 2)))
        with pytest.raises(ValueError):
            add_ridge(K, 0.0)
        cross = kernel_matrix(default_metric("full", 2), rng.normal(size=(3, 2)), rng.normal(size=(2, 2)))
        with pytest.raises(ValueError):
            add_ridge(cross, 1.0)

    def test_values_read_only(self, rng):
        K = kernel_matrix(default_metric("full", 2), rng.normal(size=(3, 2)))
        with pytest.raises(ValueError):
            K.values[0, 0] = 2.0

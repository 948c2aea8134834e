import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_difference, relative_error
from hinite.balance import hsic, kernels
from hinite.tensor import backward, parameter


def explicit_hsic(U, T):
    """tr(K M L M) / N^2 with every matrix built entrywise."""
    N = len(T)
    K = np.empty((N, N))
    L = np.empty((N, N))
    for i in range(N):
        for j in range(N):
            K[i, j] = np.exp(-np.sum((U[i] - U[j]) ** 2) / 2)
            L[i, j] = np.exp(-((T[i] - T[j]) ** 2) / 2)
    M = np.eye(N) - np.ones((N, N)) / N
    return np.trace(K @ M @ L @ M) / N**2


class TestKernels:
    def test_unit_diagonal(self):
        U = np.random.default_rng(0).normal(size=(6, 3)) * 10
        K, L = kernels(U, np.zeros(6))
        np.testing.assert_array_equal(np.diag(K), 1.0)
        np.testing.assert_array_equal(np.diag(L), 1.0)

    def test_treatment_kernel_value(self):
        _, L = kernels(np.zeros((2, 1)), [0, 1])
        assert L[0, 1] == pytest.approx(0.60653, abs=1e-5)
        assert L[0, 1] == np.exp(-0.5)

    def test_pairwise_loop(self):
        U = np.random.default_rng(1).normal(size=(3, 4))
        K, _ = kernels(U, [0, 1, 0])
        for i in range(3):
            for j in range(3):
                assert K[i, j] == pytest.approx(np.exp(-np.sum((U[i] - U[j]) ** 2) / 2), rel=1e-12)
        np.testing.assert_array_equal(K, K.T)
        assert np.all((K > 0) & (K <= 1))


class TestHsic:
    def test_constant_treatment_is_zero(self):
        U = np.random.default_rng(2).normal(size=(7, 3))
        assert float(hsic(U, np.ones(7)).values) == 0.0

    def test_single_unit_is_zero(self):
        assert float(hsic(np.ones((1, 3)), [1]).values) == 0.0

    def test_explicit_matrix_oracle(self):
        U = np.array([[0.1, -0.3], [0.5, 0.2], [-0.4, 0.0], [0.3, 0.9]])
        T = np.array([0.0, 1.0, 1.0, 0.0])
        assert abs(float(hsic(U, T).values) - explicit_hsic(U, T)) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 2**31))
    def test_nonnegative_and_permutation_invariant(self, n, d, seed):
        rng = np.random.default_rng(seed)
        U = rng.normal(size=(n, d)) * rng.uniform(0.1, 3)
        T = rng.integers(0, 2, n).astype(float)
        value = float(hsic(U, T).values)
        assert value >= 0
        perm = rng.permutation(n)
        assert float(hsic(U[perm], T[perm]).values) == pytest.approx(value, rel=1e-10, abs=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        U = parameter(rng.normal(size=(8, 3)))
        T = rng.integers(0, 2, 8).astype(float)
        backward(hsic(U, T))
        fd = central_difference(lambda: float(hsic(U.values, T).values), {"U": U.values})
        assert relative_error(U.grad, fd["U"]) <= 1e-4

    def test_statistical_sanity(self):
        rng = np.random.default_rng(11)
        N = 512
        T = rng.integers(0, 2, N).astype(float)
        independent = rng.normal(size=(N, 4))
        dependent = independent.copy()
        dependent[:, 0] = T
        h_ind = float(hsic(independent, T).values)
        h_dep = float(hsic(dependent, T).values)
        assert h_ind * 10 <= h_dep

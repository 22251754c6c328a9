import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2x import numerics
from i2x.errors import (
    DimensionMismatchError,
    NonFiniteError,
    NonSymmetricError,
    NotPositiveDefiniteError,
)


def random_symmetric(n, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.normal(size=(n, n))
    return (a + a.T) / 2.0


def random_spd(n, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def gaussian_elimination_solve(a, b):
    """Independent oracle: Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = a.shape[0]
    aug = np.hstack([a, b])
    for col in range(n):
        pivot = col + np.argmax(np.abs(aug[col:, col]))
        aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] = aug[col] / aug[col, col]
        for row in range(n):
            if row != col:
                aug[row] -= aug[row, col] * aug[col]
    return aug[:, n:]


class TestSymEig:
    def test_diagonal(self):
        res = numerics.sym_eig([[2.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(res.eigenvalues, [2.0, 1.0])
        np.testing.assert_allclose(np.abs(res.eigenvectors), np.eye(2))

    def test_zero_matrix(self):
        res = numerics.sym_eig(np.zeros((2, 2)))
        np.testing.assert_allclose(res.eigenvalues, [0.0, 0.0])
        np.testing.assert_allclose(res.eigenvectors.T @ res.eigenvectors, np.eye(2),
                                   atol=1e-12)

    def test_reconstruction_random_8x8(self):
        a = random_symmetric(8, seed=7)
        res = numerics.sym_eig(a)
        rebuilt = res.eigenvectors @ np.diag(res.eigenvalues) @ res.eigenvectors.T
        assert np.abs(rebuilt - a).max() <= 1e-8

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("n", [2, 5, 16])
    def test_invariants(self, n, seed):
        a = random_symmetric(n, seed)
        res = numerics.sym_eig(a)
        assert np.all(np.diff(res.eigenvalues) <= 1e-12)  # descending
        v = res.eigenvectors
        assert np.abs(v.T @ v - np.eye(n)).max() <= 1e-8
        assert abs(np.trace(a) - res.eigenvalues.sum()) <= 1e-8
        for i in range(n):
            lhs = a @ v[:, i]
            rhs = res.eigenvalues[i] * v[:, i]
            scale = max(1.0, abs(res.eigenvalues[i]))
            assert np.abs(lhs - rhs).max() <= 1e-6 * scale

    def test_deterministic(self):
        a = random_symmetric(6, seed=3)
        r1 = numerics.sym_eig(a.copy())
        r2 = numerics.sym_eig(a.copy())
        assert np.array_equal(r1.eigenvalues, r2.eigenvalues)
        assert np.array_equal(r1.eigenvectors, r2.eigenvectors)

    def test_rejects_asymmetric(self):
        with pytest.raises(NonSymmetricError):
            numerics.sym_eig([[1.0, 2.0], [0.0, 1.0]])

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            numerics.sym_eig([[np.nan, 0.0], [0.0, 1.0]])

    def test_rejects_rectangular(self):
        with pytest.raises(DimensionMismatchError):
            numerics.sym_eig(np.zeros((2, 3)))


class TestSolveSpd:
    def test_identity_system(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_allclose(numerics.solve_spd(np.eye(3), b), b)

    def test_diagonal_solve(self):
        x = numerics.solve_spd([[4.0, 0.0], [0.0, 9.0]], [[8.0], [27.0]])
        np.testing.assert_allclose(x, [[2.0], [3.0]])

    def test_matches_elimination_oracle(self):
        a = random_spd(12, seed=5)
        rng = np.random.Generator(np.random.PCG64(6))
        b = rng.normal(size=(12, 3))
        x = numerics.solve_spd(a, b)
        expected = gaussian_elimination_solve(a, b)
        assert np.abs(x - expected).max() <= 1e-8

    @pytest.mark.parametrize("seed", range(8))
    def test_residual_bound(self, seed):
        n = 4 + seed
        a = random_spd(n, seed)
        rng = np.random.Generator(np.random.PCG64(seed + 100))
        b = rng.normal(size=(n, 2))
        x = numerics.solve_spd(a, b)
        assert np.abs(a @ x - b).max() <= 1e-8 * max(1.0, np.abs(b).max())

    def test_vector_rhs(self):
        a = random_spd(5, seed=1)
        b = np.arange(5.0)
        x = numerics.solve_spd(a, b)
        assert x.shape == (5,)
        np.testing.assert_allclose(a @ x, b, atol=1e-10)

    def test_rejects_indefinite(self):
        with pytest.raises(NotPositiveDefiniteError):
            numerics.solve_spd([[1.0, 0.0], [0.0, -1.0]], [[1.0], [1.0]])

    def test_rejects_semidefinite(self):
        with pytest.raises(NotPositiveDefiniteError):
            numerics.solve_spd(np.zeros((2, 2)), np.ones((2, 1)))

    def test_rejects_mismatched_rhs(self):
        with pytest.raises(DimensionMismatchError):
            numerics.solve_spd(np.eye(3), np.ones((2, 1)))


class TestPairwiseSqDist:
    def test_three_four_five(self):
        d = numerics.pairwise_sq_dist([[0.0, 0.0]], [[3.0, 4.0]])
        assert d[0, 0] == 25.0

    def test_self_distance_zero(self):
        rng = np.random.Generator(np.random.PCG64(2))
        a = rng.normal(size=(7, 3))
        d = numerics.pairwise_sq_dist(a, a)
        assert np.all(np.diag(d) == 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.Generator(np.random.PCG64(9))
        a = rng.normal(size=(10, 4))
        b = rng.normal(size=(6, 4))
        d = numerics.pairwise_sq_dist(a, b)
        for i in range(10):
            for j in range(6):
                expected = sum((a[i, t] - b[j, t]) ** 2 for t in range(4))
                assert abs(d[i, j] - expected) <= 1e-10

    def test_rejects_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            numerics.pairwise_sq_dist(np.zeros((2, 3)), np.zeros((2, 4)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 12))
    def test_symmetric_and_nonnegative(self, seed, n):
        rng = np.random.Generator(np.random.PCG64(seed))
        a = rng.normal(size=(n, 3))
        d = numerics.pairwise_sq_dist(a, a)
        assert np.all(d >= 0.0)
        assert np.array_equal(d, d.T)

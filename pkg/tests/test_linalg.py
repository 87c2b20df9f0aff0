import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoalb import linalg
from aoalb.errors import (
    EmptySnapshotBlock,
    NoConvergence,
    NonSquare,
    NotHermitian,
    RankDeficient,
)
from aoalb.linalg import hermitian_eig, least_squares, sample_covariance


def random_hermitian(rng, n):
    x = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return x + x.conj().T


def reference_eigenvalues(a, tol=1e-14):
    """Classical max-pivot real Jacobi on the 2n x 2n real embedding of ``a``.

    Each eigenvalue of ``a`` appears twice in the embedding.
    """
    re, im = a.real, a.imag
    m = np.block([[re, -im], [im, re]]).astype(float)
    size = m.shape[0]
    for _ in range(100 * size * size):
        off = np.abs(m - np.diag(np.diag(m)))
        p, q = np.unravel_index(np.argmax(off), off.shape)
        if off[p, q] <= tol * np.linalg.norm(m):
            break
        theta = 0.5 * np.arctan2(2 * m[p, q], m[q, q] - m[p, p])
        c, s = np.cos(theta), np.sin(theta)
        rot = np.eye(size)
        rot[p, p] = rot[q, q] = c
        rot[p, q] = s
        rot[q, p] = -s
        m = rot.T @ m @ rot
    values = np.sort(np.diag(m))[::-1]
    return values[::2]


class TestHermitianEig:
    def test_identity(self):
        w, v = hermitian_eig(np.eye(4, dtype=complex))
        np.testing.assert_allclose(w, [1, 1, 1, 1])
        np.testing.assert_allclose(v.conj().T @ v, np.eye(4), atol=1e-12)

    def test_diagonal(self):
        w, v = hermitian_eig(np.diag([3.0, 1.0, 2.0]).astype(complex))
        np.testing.assert_allclose(w, [3, 2, 1])
        np.testing.assert_allclose(np.abs(v), np.eye(3)[:, [0, 2, 1]])

    def test_seed7_matches_reference_jacobi(self):
        a = random_hermitian(np.random.default_rng(7), 16)
        w, _ = hermitian_eig(a)
        np.testing.assert_allclose(w, reference_eigenvalues(a), atol=1e-8)
        np.testing.assert_allclose(w, np.linalg.eigvalsh(a)[::-1], atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 16), seed=st.integers(0, 2**32 - 1))
    def test_residual_and_unitarity(self, n, seed):
        a = random_hermitian(np.random.default_rng(seed), n)
        w, v = hermitian_eig(a)
        fro = np.linalg.norm(a)
        assert np.all(np.diff(w) <= 0)
        assert np.linalg.norm(a @ v - v * w, axis=0).max() <= 1e-10 * fro
        assert np.linalg.norm(v.conj().T @ v - np.eye(n)) <= 1e-10
        assert abs(np.trace(a).real - w.sum()) <= 1e-9 * fro

    def test_scaling(self):
        a = random_hermitian(np.random.default_rng(3), 8)
        w1, v1 = hermitian_eig(a)
        w2, v2 = hermitian_eig(2.5 * a)
        np.testing.assert_allclose(w2, 2.5 * w1, atol=1e-9)
        # phase convention makes the columns directly comparable
        np.testing.assert_allclose(v2, v1, atol=1e-9)

    def test_phase_convention(self):
        a = random_hermitian(np.random.default_rng(11), 6)
        _, v = hermitian_eig(a)
        first = v[0]
        assert np.all(first.imag == 0)
        assert np.all(first.real > 0)

    def test_stack(self):
        rng = np.random.default_rng(5)
        stack = np.stack([random_hermitian(rng, 5) for _ in range(7)])
        w, v = hermitian_eig(stack)
        assert w.shape == (7, 5) and v.shape == (7, 5, 5)
        for i in range(7):
            wi, vi = hermitian_eig(stack[i])
            np.testing.assert_array_equal(w[i], wi)
            np.testing.assert_array_equal(v[i], vi)

    def test_deterministic(self):
        a = random_hermitian(np.random.default_rng(1), 12)
        first = hermitian_eig(a)
        second = hermitian_eig(a.copy())
        np.testing.assert_array_equal(first.eigenvalues, second.eigenvalues)
        np.testing.assert_array_equal(first.eigenvectors, second.eigenvectors)

    def test_zero_matrix(self):
        w, v = hermitian_eig(np.zeros((3, 3), dtype=complex))
        np.testing.assert_array_equal(w, 0)
        np.testing.assert_array_equal(v, np.eye(3))

    def test_non_square(self):
        with pytest.raises(NonSquare):
            hermitian_eig(np.zeros((3, 4), dtype=complex))

    def test_not_hermitian(self):
        a = np.eye(3, dtype=complex)
        a[0, 1] = 1.0
        with pytest.raises(NotHermitian):
            hermitian_eig(a)

    def test_tiny_asymmetry_tolerated(self):
        a = random_hermitian(np.random.default_rng(2), 4)
        a[0, 1] += 1e-12
        hermitian_eig(a)

    def test_no_convergence(self, monkeypatch):
        monkeypatch.setattr(linalg, "MAX_SWEEPS", 1)
        with pytest.raises(NoConvergence):
            hermitian_eig(random_hermitian(np.random.default_rng(0), 10))


class TestSampleCovariance:
    def test_single_snapshot(self):
        x = np.array([[1 + 1j], [2 - 1j], [0.5j]])
        np.testing.assert_allclose(sample_covariance(x), x @ x.conj().T)

    def test_orthogonal_snapshots(self):
        x = np.zeros((4, 2), dtype=complex)
        x[0, 0] = 1
        x[1, 1] = 1j
        w, _ = hermitian_eig(sample_covariance(x))
        np.testing.assert_allclose(w, [0.5, 0.5, 0, 0], atol=1e-15)

    def test_exactly_hermitian(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((16, 777)) + 1j * rng.standard_normal((16, 777))
        r = sample_covariance(x)
        assert np.linalg.norm(r - r.conj().T) <= 1e-12
        assert np.linalg.eigvalsh(r).min() >= -1e-10

    def test_noiseless_single_source_is_rank_one(self):
        rng = np.random.default_rng(9)
        steer = np.exp(-1j * np.pi * np.arange(16) * np.sin(np.deg2rad(23.0)))
        signal = rng.standard_normal(2000) + 1j * rng.standard_normal(2000)
        w, v = hermitian_eig(sample_covariance(np.outer(steer, signal)))
        assert w[1] / w[0] <= 1e-8
        assert abs(np.vdot(v[:, 0], steer)) / np.linalg.norm(steer) >= 1 - 1e-8

    def test_empty(self):
        with pytest.raises(EmptySnapshotBlock):
            sample_covariance(np.zeros((4, 0), dtype=complex))


class TestLeastSquares:
    def test_identity(self):
        b = np.array([[1 + 2j], [3.0], [-1j]])
        x, res = least_squares(np.eye(3, dtype=complex), b)
        np.testing.assert_allclose(x, b, atol=1e-15)
        assert res <= 1e-15

    def test_consistent_overdetermined(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((10, 3)) + 1j * rng.standard_normal((10, 3))
        truth = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
        x, res = least_squares(a, a @ truth)
        np.testing.assert_allclose(x, truth, atol=1e-12)
        assert res <= 1e-10

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((8, 3)) + 1j * rng.standard_normal((8, 3))
        b = rng.standard_normal((8, 1)) + 1j * rng.standard_normal((8, 1))
        gram = a.conj().T @ a
        oracle = np.linalg.inv(gram) @ a.conj().T @ b
        x, res = least_squares(a, b)
        np.testing.assert_allclose(x, oracle, atol=1e-9)
        np.testing.assert_allclose(x, np.linalg.pinv(a) @ b, atol=1e-9)
        assert res == pytest.approx(np.linalg.norm(a @ oracle - b), rel=1e-9)

    def test_stacked(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((5, 6, 2)) + 0j
        b = rng.standard_normal((5, 6, 1)) + 0j
        x, res = least_squares(a, b)
        assert x.shape == (5, 2, 1) and res.shape == (5,)
        np.testing.assert_allclose(x[3], np.linalg.pinv(a[3]) @ b[3], atol=1e-12)

    def test_rank_deficient(self):
        a = np.ones((4, 2), dtype=complex)
        with pytest.raises(RankDeficient):
            least_squares(a, np.ones((4, 1), dtype=complex))

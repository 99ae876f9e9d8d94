import numpy as np
import pytest

from maukf import linalg
from maukf.rng import Stream


class TestCholesky:
    def test_diagonal(self):
        l = linalg.cholesky_spd(np.diag([4.0, 9.0]))
        np.testing.assert_allclose(l, np.diag([2.0, 3.0]), atol=0)

    def test_reconstruction(self):
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        l = linalg.cholesky_spd(m)
        assert np.allclose(l, np.array([[1.41421356, 0.0], [0.70710678, 1.22474487]]), atol=1e-8)
        np.testing.assert_allclose(l @ l.T, m, atol=1e-12)

    def test_zero_matrix_with_jitter(self):
        l = linalg.cholesky_spd(np.zeros((3, 3)), jitter=1e-9)
        np.testing.assert_allclose(l, np.sqrt(1e-9) * np.eye(3), atol=1e-18)

    def test_ladder_clean_matrix_uses_zero_jitter(self):
        l, jit = linalg.cholesky_laddered(np.diag([4.0, 9.0]))
        assert jit == 0.0
        np.testing.assert_allclose(l, np.diag([2.0, 3.0]))

    def test_ladder_rescues_semidefinite(self):
        m = np.diag([1.0, 0.0])
        l, jit = linalg.cholesky_laddered(m)
        assert jit > 0.0
        np.testing.assert_allclose(l @ l.T, m + jit * np.eye(2), atol=1e-15)

    def test_ladder_exhaustion_raises(self):
        m = np.diag([1.0, -10.0])
        with pytest.raises(linalg.CholeskyError):
            linalg.cholesky_laddered(m)

    def test_choose_jitter_matches_ladder(self):
        m = np.diag([1.0, 0.0])
        _, jit = linalg.cholesky_laddered(m)
        assert linalg.choose_jitter(m) == jit


class TestSolve:
    def test_spd_solve_matches_dense_solve(self):
        rng = Stream(3)
        a = rng.normal((4, 4))
        s = a @ a.T + np.eye(4)
        b = rng.normal((4, 2))
        np.testing.assert_allclose(linalg.spd_solve(s, b), np.linalg.solve(s, b), atol=1e-10)

    def test_right_solve(self):
        rng = Stream(4)
        a = rng.normal((3, 3))
        s = a @ a.T + np.eye(3)
        b = rng.normal((2, 3))
        np.testing.assert_allclose(linalg.spd_solve_right(b, s), b @ np.linalg.inv(s), atol=1e-10)


class TestSoftmax:
    def test_rows_sum_to_one_and_positive(self):
        rng = Stream(5)
        for _ in range(200):
            v = rng.normal(11) * 10.0
            w = linalg.softmax(v)
            assert abs(w.sum() - 1.0) < 1e-12
            assert np.all(w > 0.0)

    def test_huge_logits_are_safe(self):
        # max-subtraction keeps this finite where a naive exp overflows
        w = linalg.softmax(np.array([1e8, 0.0, -1e8]))
        assert np.all(np.isfinite(w))
        assert abs(w.sum() - 1.0) < 1e-12

    def test_saturated_head_stays_positive(self):
        logits = np.zeros(11)
        logits[0] = 50.0
        w = linalg.softmax(logits)
        assert abs(w[0] - 1.0) < 1e-12
        assert np.all(w > 0.0)
        assert abs(w.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(w[1:], np.exp(-50.0) * np.ones(10), rtol=1e-10)

    def test_rowwise_on_matrices(self):
        m = Stream(6).normal((4, 7))
        w = linalg.softmax(m)
        np.testing.assert_allclose(w.sum(axis=1), np.ones(4), atol=1e-12)


class TestLayerNorm:
    def test_matches_direct_formula(self):
        rng = Stream(7)
        a = rng.normal(16) * 3.0
        gain = rng.normal(16)
        bias = rng.normal(16)
        y, _, _ = linalg.layernorm(a, gain, bias)
        mu = a.mean()
        var = ((a - mu) ** 2).mean()
        expect = gain * (a - mu) / np.sqrt(var + 1e-5) + bias
        np.testing.assert_allclose(y, expect, atol=1e-12)

    def test_shift_invariance_with_identity_affine(self):
        a = Stream(8).normal(10)
        ones = np.ones(10)
        zeros = np.zeros(10)
        y1, _, _ = linalg.layernorm(a, ones, zeros)
        y2, _, _ = linalg.layernorm(a + 123.456, ones, zeros)
        np.testing.assert_allclose(y1, y2, atol=1e-9)


class TestWrapAngle:
    @pytest.mark.parametrize("angle,expect", [
        (np.pi, np.pi),
        (-np.pi, np.pi),
        (0.0, 0.0),
        (3 * np.pi, np.pi),
        (2 * np.pi + 0.1, 0.1),
        (-2 * np.pi - 0.1, -0.1),
    ])
    def test_edges(self, angle, expect):
        assert abs(linalg.wrap_angle(angle) - expect) < 1e-12

    def test_range_property(self):
        a = Stream(9).uniform(-50.0, 50.0, 1000)
        w = linalg.wrap_angle(a)
        assert np.all(w > -np.pi) and np.all(w <= np.pi)
        np.testing.assert_allclose(np.cos(w), np.cos(a), atol=1e-9)
        np.testing.assert_allclose(np.sin(w), np.sin(a), atol=1e-9)


def test_weighted_scatter_matches_loop():
    rng = Stream(10)
    dev = rng.normal((5, 11))
    w = rng.uniform(0.01, 1.0, 11)
    expect = sum(w[i] * np.outer(dev[:, i], dev[:, i]) for i in range(11))
    np.testing.assert_allclose(linalg.weighted_scatter(dev, w), expect, atol=1e-12)


def test_weighted_cross_matches_loop():
    rng = Stream(11)
    dx = rng.normal((5, 11))
    dz = rng.normal((2, 11))
    w = rng.uniform(0.01, 1.0, 11)
    expect = sum(w[i] * np.outer(dx[:, i], dz[:, i]) for i in range(11))
    np.testing.assert_allclose(linalg.weighted_cross(dx, dz, w), expect, atol=1e-12)

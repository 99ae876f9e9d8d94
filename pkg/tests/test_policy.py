import numpy as np
import pytest

from maukf import policy as pol
from maukf.linalg import LAYERNORM_EPS
from maukf.rng import Stream


@pytest.fixture(scope="module")
def params():
    return pol.init_params(Stream(77))


class TestEncode:
    def test_zero_residual_zero_bias_gives_zero(self, params):
        p = params.copy()
        p.b_in[:] = 0.0
        p.ln_in_bias[:] = 0.0
        e = pol.encode(p, np.zeros(2))
        np.testing.assert_array_equal(e, np.zeros(32))

    def test_output_is_nonnegative(self, params):
        rng = Stream(1)
        for _ in range(50):
            assert np.all(pol.encode(params, rng.normal(2) * 100.0) >= 0.0)

    def test_normalization_bounds_huge_residuals(self, params):
        e_small = pol.encode(params, np.array([1.0, 0.01]))
        e_huge = pol.encode(params, np.array([1e6, 1e4]))
        d = 32
        bound = (np.linalg.norm(params.ln_in_gain) * np.sqrt(d)
                 + np.linalg.norm(params.ln_in_bias) * np.sqrt(d))
        assert np.linalg.norm(e_small) <= bound
        assert np.linalg.norm(e_huge) <= bound

    def test_matches_hand_computed_layernorm(self, params):
        nu = np.array([3.7, -1.2])
        a = params.w_in @ nu + params.b_in
        mu, var = a.mean(), ((a - a.mean()) ** 2).mean()
        expect = np.maximum(
            params.ln_in_gain * (a - mu) / np.sqrt(var + LAYERNORM_EPS) + params.ln_in_bias,
            0.0,
        )
        np.testing.assert_allclose(pol.encode(params, nu), expect, atol=1e-12)


class TestGruStep:
    def _zeroed(self, params):
        p = params.copy()
        for name, t in p.tensors():
            if name.startswith(("w_", "u_", "b_")) and name not in ("w_in", "b_in"):
                t[:] = 0.0
        return p

    def test_all_zero_parameters_halve_state(self, params):
        p = self._zeroed(params)
        h_prev = Stream(2).normal(32)
        h = pol.gru_step(p, Stream(3).normal(32), h_prev)
        np.testing.assert_allclose(h, 0.5 * h_prev, atol=1e-12)

    def test_saturated_update_gate_overwrites(self, params):
        p = self._zeroed(params)
        p.b_u[:] = 50.0
        h_prev = Stream(4).normal(32)
        h = pol.gru_step(p, Stream(5).normal(32), h_prev)
        np.testing.assert_allclose(h, np.zeros(32), atol=1e-12)

    def test_closed_update_gate_holds(self, params):
        p = self._zeroed(params)
        p.b_u[:] = -50.0
        h_prev = Stream(6).normal(32)
        h = pol.gru_step(p, Stream(7).normal(32), h_prev)
        np.testing.assert_allclose(h, h_prev, atol=1e-12)

    def test_matches_literal_gate_equations(self, params):
        """Transcribe the four gate equations independently."""
        rng = Stream(8)
        for _ in range(20):
            e = rng.normal(32)
            h_prev = rng.normal(32)
            sig = lambda x: 1.0 / (1.0 + np.exp(-x))
            u = sig(params.w_u @ e + params.u_u @ h_prev + params.b_u)
            r = sig(params.w_r @ e + params.u_r @ h_prev + params.b_r)
            hc = np.tanh(params.w_h @ e + params.u_h @ (r * h_prev) + params.b_h)
            expect = (1.0 - u) * h_prev + u * hc
            np.testing.assert_allclose(pol.gru_step(params, e, h_prev), expect, atol=1e-12)

    def test_state_stays_bounded(self, params):
        rng = Stream(9)
        h = np.zeros(32)
        for _ in range(200):
            h = pol.gru_step(params, rng.normal(32), h)
        assert np.all(np.abs(h) <= 1.0 + 1e-12)


class TestWeightSynthesis:
    def test_zero_head_emits_exact_uniform(self, params):
        w, _ = pol.synthesize_weights(params, Stream(10).normal(32))
        np.testing.assert_array_equal(w.w_mean, np.full(11, 1.0 / 11.0))
        np.testing.assert_array_equal(w.w_cov, np.full(11, 1.0 / 11.0))
        assert w.spread == 3.0

    def test_saturated_logits_stay_convex(self, params):
        p = params.copy()
        p.b_head_mean[0] = 50.0
        w, _ = pol.synthesize_weights(p, Stream(11).normal(32))
        assert abs(w.w_mean[0] - 1.0) < 1e-9
        assert np.all(w.w_mean > 0.0)
        assert abs(w.w_mean.sum() - 1.0) < 1e-12

    def test_convexity_over_random_states(self, params):
        p = params.copy()
        rng = Stream(12)
        p.w_head_mean[:] = 0.5 * rng.normal((11, 16))
        p.w_head_cov[:] = 0.5 * rng.normal((11, 16))
        for _ in range(1000):
            h = rng.normal(32) * np.sqrt(10.0)
            w, _ = pol.synthesize_weights(p, h)
            assert abs(w.w_mean.sum() - 1.0) < 1e-12
            assert abs(w.w_cov.sum() - 1.0) < 1e-12
            assert np.min(w.w_mean) > 0.0 and np.min(w.w_cov) > 0.0

    def test_heads_are_independent(self, params):
        p = params.copy()
        p.b_head_mean[3] = 2.0
        wm, _ = pol.synthesize_weights(p, np.zeros(32))
        assert wm.w_mean[3] > wm.w_mean[0]
        np.testing.assert_array_equal(wm.w_cov, np.full(11, 1.0 / 11.0))


class TestAuxDecoder:
    def test_constant_reconstruction(self, params):
        p = params.copy()
        p.w_dec[:] = 0.0
        p.b_dec[:] = [2.5, -0.3]
        np.testing.assert_array_equal(pol.aux_decode(p, Stream(13).normal(16)), [2.5, -0.3])

    def test_zero_context_returns_bias(self, params):
        np.testing.assert_array_equal(pol.aux_decode(params, np.zeros(16)), params.b_dec)


class TestInit:
    def test_same_seed_identical(self):
        a = pol.init_params(Stream(20))
        b = pol.init_params(Stream(20))
        for (_, ta), (_, tb) in zip(a.tensors(), b.tensors()):
            assert np.array_equal(ta, tb)

    def test_recurrent_matrices_orthogonal(self, params):
        for u in (params.u_u, params.u_r, params.u_h):
            np.testing.assert_allclose(u @ u.T, np.eye(32), atol=1e-10)

    def test_heads_start_at_zero(self, params):
        assert np.all(params.w_head_mean == 0.0)
        assert np.all(params.b_head_cov == 0.0)

    def test_fan_in_scaling_bounds(self, params):
        assert np.max(np.abs(params.w_u)) <= 1.0 / np.sqrt(32)
        assert np.max(np.abs(params.w_in)) <= 1.0 / np.sqrt(2)

    def test_validate_catches_bad_shapes(self, params):
        p = params.copy()
        p.w_proj = np.zeros((3, 3))
        with pytest.raises(ValueError):
            p.validate()

    def test_custom_dims(self):
        dims = pol.PolicyDims(n_x=5, n_z=2, d_h=8, d_p=4)
        p = pol.init_params(Stream(21), dims)
        assert p.w_in.shape == (8, 2)
        assert p.w_head_mean.shape == (11, 4)
        assert p.dims() == dims


class TestCheckpoint:
    def test_roundtrip_is_bit_exact(self, params, tmp_path):
        path = tmp_path / "p.ckpt"
        pol.save_checkpoint(params, path, seed=77, extra={"note": "test"})
        back = pol.load_checkpoint(path)
        for (na, ta), (nb, tb) in zip(params.tensors(), back.tensors()):
            assert na == nb
            assert ta.tobytes() == tb.tobytes()

    def test_summary(self, params, tmp_path):
        path = tmp_path / "p.ckpt"
        pol.save_checkpoint(params, path, seed=77)
        s = pol.checkpoint_summary(path)
        assert s["dims"] == {"n_x": 5, "n_z": 2, "d_h": 32, "d_p": 16}
        assert s["total_parameters"] == sum(t.size for _, t in params.tensors())

    def test_version_check(self, params, tmp_path):
        import json

        path = tmp_path / "p.ckpt"
        pol.save_checkpoint(params, path)
        doc = json.loads(path.read_text())
        doc["version"] = 999
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            pol.load_checkpoint(path)


class TestPolicyForward:
    def test_full_pass_shapes_and_consistency(self, params):
        nu = np.array([5.0, -0.1])
        h_prev = np.zeros(32)
        w, h, c, dec = pol.policy_forward(params, nu, h_prev)
        e = pol.encode(params, nu)
        np.testing.assert_array_equal(h, pol.gru_step(params, e, h_prev))
        w2, c2 = pol.synthesize_weights(params, h)
        np.testing.assert_array_equal(w.w_mean, w2.w_mean)
        np.testing.assert_array_equal(c, c2)
        np.testing.assert_array_equal(dec, pol.aux_decode(params, c))

import numpy as np
import pytest

from maukf import adaptive, config as cfg_mod, dynamics, policy as pol
from maukf.dynamics import NoiseModel, gen_train_episode
from maukf.linalg import weighted_scatter
from maukf.rng import Stream
from maukf.ukf import STANDARD_MODEL, UKFConfig, run_ukf, uniform_weights


@pytest.fixture(scope="module")
def setup():
    noise = NoiseModel()
    cfg = adaptive.AdaptiveConfig(q=noise.process_cov(0.1), r=noise.measurement_cov())
    params = pol.init_params(Stream(7))
    return cfg, params


class TestInitEquivalence:
    def test_zero_head_policy_equals_uniform_ukf_bit_exactly(self, setup):
        """The key cross-module identity: an untrained policy is a plain UKF
        with uniform convex weights at the same spread."""
        cfg, params = setup
        ucfg = UKFConfig(uniform_weights(5, cfg.gamma), cfg.q, cfg.r, cfg.model)
        for i in range(10):
            ep = gen_train_episode(Stream(1000).derive(i), 60)
            t_ma = adaptive.run_adaptive(ep, params, cfg)
            t_ukf = run_ukf(ep, ucfg)
            assert np.array_equal(t_ma.means, t_ukf.means)
            assert np.array_equal(t_ma.covs, t_ukf.covs)
            assert np.array_equal(t_ma.innovations, t_ukf.innovations)

    def test_weight_log_is_uniform_at_init(self, setup):
        cfg, params = setup
        ep = gen_train_episode(Stream(2), 20)
        track = adaptive.run_adaptive(ep, params, cfg)
        np.testing.assert_array_equal(track.weight_log, np.full((20, 22), 1.0 / 11.0))


class TestMaStep:
    def test_deterministic(self, setup):
        cfg, params = setup
        ep = gen_train_episode(Stream(3), 10)
        t1 = adaptive.run_adaptive(ep, params, cfg)
        t2 = adaptive.run_adaptive(ep, params, cfg)
        assert np.array_equal(t1.means, t2.means)

    def test_weight_rows_sum_to_one(self, setup):
        cfg, params = setup
        p = params.copy()
        rng = Stream(4)
        p.w_head_mean[:] = 0.4 * rng.normal((11, 16))
        p.w_head_cov[:] = 0.4 * rng.normal((11, 16))
        ep = gen_train_episode(Stream(5), 60)
        track = adaptive.run_adaptive(ep, p, cfg)
        np.testing.assert_allclose(track.weight_log[:, :11].sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(track.weight_log[:, 11:].sum(axis=1), 1.0, atol=1e-12)

    def test_center_concentration_collapses_prior_to_q(self, setup):
        """Pushing both heads onto the center point makes the recombined
        prior covariance approach the process noise alone."""
        cfg, params = setup
        p = params.copy()
        p.b_head_mean[0] = 50.0
        p.b_head_cov[0] = 50.0
        ep = gen_train_episode(Stream(6), 1)
        from maukf.ukf import belief_from_first_measurement, make_sigma, meas_mean, recombine, residual

        belief = belief_from_first_measurement(ep.meas[0])
        pstate = pol.initial_state(p.dims(), cfg.gamma)
        pts = make_sigma(belief, pstate.w_prev)
        prop = cfg.model.f(pts, ep.dt)
        zp = cfg.model.h(prop)
        zhat_prev = meas_mean(zp, pstate.w_prev.w_mean, cfg.model.angular)
        nu_t = residual(ep.meas[0], zhat_prev, cfg.model.angular)
        weights, _, _, _ = pol.policy_forward(p, nu_t, pstate.h, cfg.gamma)
        assert weights.w_mean[0] > 1.0 - 1e-9
        _, _, cov = recombine(prop, weights.w_mean, weights.w_cov, cfg.q)
        scatter = cov - cfg.q
        # residual scatter is the tiny leakage of the off-center weights
        assert np.max(np.abs(scatter)) < 1e-4 * np.max(np.abs(cfg.q))

    def test_nonfinite_policy_output_aborts_with_step(self, setup):
        cfg, params = setup
        p = params.copy()
        p.w_in[:] = np.inf
        ep = gen_train_episode(Stream(7), 5)
        with pytest.raises(Exception) as exc:
            adaptive.run_adaptive(ep, p, cfg)
        assert "step 1" in str(exc.value) or "non-finite" in str(exc.value)

    def test_diagnostics_are_opt_in(self, setup):
        cfg, params = setup
        ep = gen_train_episode(Stream(8), 5)
        track = adaptive.run_adaptive(ep, params, cfg, log_weights=False)
        assert track.weight_log is None
        track2 = adaptive.run_adaptive(ep, params, cfg, log_context=True)
        assert len(track2.diagnostics) == 5
        assert track2.diagnostics[0].w_mean.shape == (11,)


class TestTapedUnroll:
    def test_taped_forward_identical_to_tape_free(self, setup):
        cfg, params = setup
        p = params.copy()
        rng = Stream(9)
        p.w_head_mean[:] = 0.3 * rng.normal((11, 16))
        p.w_head_cov[:] = 0.3 * rng.normal((11, 16))
        ep = gen_train_episode(Stream(10), 40)
        taped = adaptive.taped_episode_loss(ep, p, 0.1, cfg)
        track = adaptive.run_adaptive(ep, p, cfg)
        assert np.array_equal(taped.means, track.means)

    def test_tape_replays_bit_exactly(self, setup):
        cfg, params = setup
        ep = gen_train_episode(Stream(11), 10)
        taped = adaptive.taped_episode_loss(ep, params, 0.1, cfg)
        assert taped.tape.replay()

    def test_loss_decomposition(self, setup):
        cfg, params = setup
        ep = gen_train_episode(Stream(12), 15)
        t0 = adaptive.taped_episode_loss(ep, params, 0.0, cfg)
        t1 = adaptive.taped_episode_loss(ep, params, 0.1, cfg)
        l0 = float(t0.tape.value(t0.loss_id))
        l1 = float(t1.tape.value(t1.loss_id))
        np.testing.assert_allclose(l1 - l0, 0.1 * t0.aux_losses.sum(), rtol=1e-12)
        np.testing.assert_allclose(l0, t0.track_losses.sum(), rtol=1e-12)

    def test_truncation_keeps_forward_cuts_gradients(self, setup):
        cfg, params = setup
        p = params.copy()
        p.w_head_mean[:] = 0.2 * Stream(13).normal((11, 16))
        ep = gen_train_episode(Stream(14), 30)
        full = adaptive.taped_episode_loss(ep, p, 0.1, cfg)
        trunc = adaptive.taped_episode_loss(ep, p, 0.1, cfg, truncate=10)
        assert float(full.tape.value(full.loss_id)) == pytest.approx(
            float(trunc.tape.value(trunc.loss_id)), rel=1e-12)
        gf = full.tape.backward(full.loss_id, [full.param_ids["u_h"]])
        gt = trunc.tape.backward(trunc.loss_id, [trunc.param_ids["u_h"]])
        assert not np.allclose(gf[full.param_ids["u_h"]], gt[trunc.param_ids["u_h"]])

    def test_gradients_flow_through_previous_weights(self, setup):
        """The proxy residual uses the previous step's mean weights, so head
        parameters must receive gradient from later steps too."""
        cfg, params = setup
        ep = gen_train_episode(Stream(15), 3)
        taped = adaptive.taped_episode_loss(ep, params, 0.0, cfg)
        g = taped.tape.backward(taped.loss_id, [taped.param_ids["w_head_mean"]])
        assert np.any(g[taped.param_ids["w_head_mean"]] != 0.0)


class TestWeightLogExport:
    def test_csv_round_trip_row_count(self, setup, tmp_path):
        cfg, params = setup
        ep = gen_train_episode(Stream(16), 12)
        track = adaptive.run_adaptive(ep, params, cfg)
        path = tmp_path / "weights.csv"
        adaptive.export_weight_log_csv(track, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 13
        assert lines[0].count("wm_") == 11 and lines[0].count("wc_") == 11

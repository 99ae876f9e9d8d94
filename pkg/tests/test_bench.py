import numpy as np
import pytest

from maukf import backend, bench, config as cfg_mod, dynamics, policy as pol
from maukf.dynamics import NoiseModel, gen_train_episode, generate_dataset
from maukf.rng import Stream
from maukf.ukf import FilterDivergence, Track, UKFConfig, classic_weights


@pytest.fixture(scope="module")
def cfg():
    return cfg_mod.load_config(None)


@pytest.fixture(scope="module")
def episodes():
    return generate_dataset(101, 12, dynamics.REGIME_TRAIN, t_steps=20)


def _fake_track(episode, offset_x=0.0, offset_y=0.0):
    means = episode.truth[1:].copy()
    means[:, 0] += offset_x
    means[:, 2] += offset_y
    t = episode.length
    return Track(means=means, covs=np.zeros((t, 5, 5)), innovations=np.zeros((t, 2)))


class TestArmse:
    def test_perfect_track_is_zero(self):
        ep = gen_train_episode(Stream(1), 10)
        assert bench.armse(_fake_track(ep), ep) == 0.0

    def test_pythagorean_constant_offset(self):
        ep = gen_train_episode(Stream(2), 10)
        assert bench.armse(_fake_track(ep, 3.0, 4.0), ep) == pytest.approx(5.0, abs=1e-12)

    def test_matches_two_pass_recomputation(self):
        ep = gen_train_episode(Stream(3), 25)
        rng = Stream(4)
        track = _fake_track(ep, 0.0, 0.0)
        track.means[:, 0] += rng.normal(25) * 7.0
        track.means[:, 2] += rng.normal(25) * 7.0
        # independent two-pass computation
        sq = []
        for k in range(25):
            dx = track.means[k, 0] - ep.truth[k + 1, 0]
            dy = track.means[k, 2] - ep.truth[k + 1, 2]
            sq.append(dx * dx + dy * dy)
        expect = float(np.sqrt(sum(sq) / 25))
        assert abs(bench.armse(track, ep) - expect) < 1e-12


class TestEvaluateMethod:
    def test_paired_identical_configs_identical_rows(self, cfg, episodes):
        q, r = cfg_mod.filter_noise(cfg)
        c = UKFConfig(classic_weights(1.0, 2.0, -2.0, 5), q, r)
        r1 = bench.evaluate_method(episodes, lambda ep: backend.run_ukf_episode(ep, c), "a", "t")
        r2 = bench.evaluate_method(episodes, lambda ep: backend.run_ukf_episode(ep, c), "b", "t")
        assert np.array_equal(r1.scores_capped, r2.scores_capped)

    def test_divergence_accounting(self, episodes):
        calls = {"n": 0}

        def flaky(ep):
            calls["n"] += 1
            if calls["n"] % 3 == 0:
                raise FilterDivergence(5, "synthetic")
            return _fake_track(ep, 1.0, 0.0)

        res = bench.evaluate_method(episodes, flaky, "flaky", "t", cap=100.0)
        assert res.divergences == len(episodes) // 3
        assert res.mean >= res.mean_completed
        assert np.all(res.scores_capped[~res.completed] == 100.0)

    def test_cap_applies_per_step(self, episodes):
        def wanderer(ep):
            t = _fake_track(ep)
            t.means[-1, 0] += 1e6  # one wild step
            return t

        res = bench.evaluate_method(episodes[:3], wanderer, "w", "t", cap=1000.0)
        assert res.divergences == 3
        expected = np.sqrt(1000.0**2 / episodes[0].length)
        np.testing.assert_allclose(res.scores_capped, expected, rtol=1e-12)

    def test_threaded_matches_serial(self, cfg, episodes):
        q, r = cfg_mod.filter_noise(cfg)
        c = UKFConfig(classic_weights(1.0, 2.0, -2.0, 5), q, r)
        serial = bench.evaluate_method(episodes, lambda ep: backend.run_ukf_episode(ep, c), "s", "t")
        threaded = bench.evaluate_method(episodes, lambda ep: backend.run_ukf_episode(ep, c),
                                         "t", "t", threads=4)
        assert np.array_equal(serial.scores_capped, threaded.scores_capped)


class TestTuner:
    def test_single_trial_deterministic(self, cfg, episodes):
        best1, log1 = bench.tune_ukf(episodes, 1, Stream(9), cfg)
        best2, log2 = bench.tune_ukf(episodes, 1, Stream(9), cfg)
        assert best1 == best2 and log1 == log2

    def test_best_not_worse_than_trials(self, cfg, episodes):
        best, log = bench.tune_ukf(episodes, 8, Stream(10), cfg)
        assert best["armse"] == min(row["armse"] for row in log)
        assert len(log) == 8

    def test_trial_log_roundtrip(self, cfg, episodes, tmp_path):
        _, log = bench.tune_ukf(episodes, 4, Stream(11), cfg)
        path = tmp_path / "trials.csv"
        bench.write_trial_log(log, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 5
        assert lines[0] == "trial,alpha,beta,kappa,armse"

    def test_imm_tuner_runs(self, cfg, episodes):
        best, log = bench.tune_imm(episodes[:6], 2, Stream(12), cfg)
        assert 0.8 <= best["pi_diag"] <= 0.999
        assert len(log) == 2


class TestReports:
    def _report(self, cfg, episodes):
        runners = bench.make_runners(cfg, ukf_star={"alpha": 3.0, "beta": 2.0, "kappa": 0.0})
        return bench.run_benchmark({"train-ct": episodes}, runners, cfg)

    def test_csv_roundtrip(self, cfg, episodes, tmp_path):
        rep = self._report(cfg, episodes)
        path = tmp_path / "report.csv"
        bench.write_report_csv(rep, path)
        rows = bench.read_report_csv(path)
        expect = bench.report_rows(rep)
        assert len(rows) == len(expect)
        for got, want in zip(rows, expect):
            for key in want:
                if isinstance(want[key], float):
                    if np.isnan(want[key]):
                        assert np.isnan(got[key])
                    else:
                        assert got[key] == want[key]
                else:
                    assert got[key] == want[key]

    def test_report_emission_deterministic(self, cfg, episodes, tmp_path):
        rep1 = self._report(cfg, episodes)
        rep2 = self._report(cfg, episodes)
        bench.write_report_csv(rep1, tmp_path / "a.csv")
        bench.write_report_csv(rep2, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_emit_without_sample_is_table_only(self, cfg, episodes, tmp_path):
        rep = self._report(cfg, episodes)
        files = bench.emit_report(rep, tmp_path)
        names = {f.name for f in files}
        assert names == {"report.csv", "report.txt", "timing.csv"}
        text = (tmp_path / "report.txt").read_text()
        assert "UKF" in text and "ARMSE" in text
        assert "mean_step_time_s" in (tmp_path / "timing.csv").read_text()

    def test_emit_with_sample_produces_figures(self, cfg, episodes, tmp_path):
        rep = self._report(cfg, episodes)
        params = pol.init_params(Stream(13))
        acfg = cfg_mod.build_adaptive_config(cfg)
        ep = episodes[0]
        tracks = {
            "ukf": backend.run_ukf_episode(ep, cfg_mod.build_ukf_config(cfg, "nominal")),
            "maukf": backend.run_adaptive_episode(ep, params, acfg, log_weights=True),
        }
        files = bench.emit_report(rep, tmp_path, (ep, tracks))
        names = {f.name for f in files}
        assert "trajectory_ukf.svg" in names and "weights.svg" in names

    def test_weight_plot_matches_log_dimensions(self, cfg, episodes, tmp_path):
        params = pol.init_params(Stream(14))
        acfg = cfg_mod.build_adaptive_config(cfg)
        track = backend.run_adaptive_episode(episodes[0], params, acfg, log_weights=True)
        path, n_series, n_rows = bench.plot_weight_log(track, tmp_path)
        assert path.exists()
        assert n_series == 22
        assert n_rows == track.weight_log.shape[0] == episodes[0].length

"""Monte Carlo evaluation harness.

Every method sees bit-identical measurement sequences (paired design), so
the reported orderings are not artifacts of sampling noise. Episodes where
a filter loses the target (position error beyond the cap, or a covariance
collapse) are counted as divergences and scored at the cap; the report
carries both the capped statistics and the completed-only statistics, since
the two conventions can disagree badly when a method diverges often.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend, config as cfg_mod, imm as imm_mod
from .adaptive import AdaptiveConfig
from .dynamics import Episode
from .policy import PolicyParams
from .rng import Stream
from .ukf import FilterDivergence, Track, UKFConfig, classic_weights

__all__ = [
    "armse",
    "MethodResult",
    "BenchReport",
    "run_benchmark",
    "tune_ukf",
    "tune_imm",
    "emit_report",
    "DIVERGENCE_CAP",
]

DIVERGENCE_CAP = 1e4
METHOD_ORDER = ["ukf", "imm", "ukf_star", "imm_star", "maukf"]
METHOD_LABELS = {
    "ukf": "UKF",
    "imm": "IMM-UKF",
    "ukf_star": "UKF*",
    "imm_star": "IMM-UKF*",
    "maukf": "MA-UKF",
}


def armse(track: Track, episode: Episode) -> float:
    """Per-episode root-mean-square position error over the T steps."""
    d = track.means[:, [0, 2]] - episode.truth[1:, [0, 2]]
    return float(np.sqrt(np.mean(d[:, 0] ** 2 + d[:, 1] ** 2)))


@dataclass
class MethodResult:
    method: str
    regime: str
    scores_capped: np.ndarray      # per-episode ARMSE, cap substituted on divergence
    completed: np.ndarray          # mask of episodes that finished under the cap
    divergences: int
    mean_step_time: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores_capped))

    @property
    def std(self) -> float:
        return float(np.std(self.scores_capped, ddof=1)) if len(self.scores_capped) > 1 else 0.0

    @property
    def mean_completed(self) -> float:
        done = self.scores_capped[self.completed]
        return float(np.mean(done)) if done.size else float("nan")

    @property
    def std_completed(self) -> float:
        done = self.scores_capped[self.completed]
        return float(np.std(done, ddof=1)) if done.size > 1 else 0.0


@dataclass
class BenchReport:
    results: dict[tuple[str, str], MethodResult]   # (regime, method) -> result
    n_episodes: int
    manifest_hash: str = ""
    config_snapshot: dict = field(default_factory=dict)
    cap: float = DIVERGENCE_CAP


def _score_episode(runner, ep: Episode, cap: float):
    """(armse, completed, wall_time) for one episode.

    A divergent episode (per-step position error beyond the cap, a
    non-finite estimate, or covariance collapse) is scored by capping the
    per-step errors at `cap`; steps a collapsed filter never produced count
    at the cap. The episode is flagged incomplete either way.
    """
    t0 = time.perf_counter()
    try:
        track = runner(ep)
        errs = track.position_errors(ep)
        ok = bool(np.all(np.isfinite(errs)) and float(np.max(errs)) <= cap)
        if not ok:
            errs = np.minimum(np.nan_to_num(errs, nan=cap, posinf=cap), cap)
        return float(np.sqrt(np.mean(errs**2))), ok, time.perf_counter() - t0
    except FilterDivergence:
        # collapse leaves no usable estimates; the whole episode sits at the cap
        return cap, False, time.perf_counter() - t0


def evaluate_method(episodes: list[Episode], runner, method: str, regime: str,
                    cap: float = DIVERGENCE_CAP, threads: int = 1) -> MethodResult:
    """Run one method over the episode set, tracking failures and step time.

    With threads > 1 the episodes fan out over a thread pool; results are
    keyed by episode index, so the aggregation is order-independent.
    """
    n = len(episodes)
    scores = np.empty(n)
    done = np.ones(n, dtype=bool)
    total_time = 0.0
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda ep: _score_episode(runner, ep, cap), episodes))
    else:
        results = [_score_episode(runner, ep, cap) for ep in episodes]
    for i, (score, ok, wall) in enumerate(results):
        scores[i] = score
        done[i] = ok
        total_time += wall
    total_steps = sum(ep.length for ep in episodes)
    return MethodResult(method, regime, scores, done, int(np.sum(~done)),
                        total_time / max(total_steps, 1))


def make_runners(cfg: dict, ukf_star: dict | None = None, imm_star: dict | None = None,
                 params: PolicyParams | None = None) -> dict:
    """Method name -> episode runner, from a resolved config."""
    runners = {}
    nominal = cfg_mod.build_ukf_config(cfg, "nominal")
    runners["ukf"] = lambda ep, c=nominal: backend.run_ukf_episode(ep, c)

    imm_cfg = cfg_mod.build_imm_config(cfg)
    runners["imm"] = lambda ep, c=imm_cfg: imm_mod.run_imm(ep, c)

    star = ukf_star if ukf_star is not None else cfg["filters"].get("ukf_star")
    if star:
        q, r = cfg_mod.filter_noise(cfg)
        w = classic_weights(star["alpha"], star["beta"], star["kappa"], 5)
        star_cfg = UKFConfig(w, q, r, nominal.model)
        runners["ukf_star"] = lambda ep, c=star_cfg: backend.run_ukf_episode(ep, c)

    istar = imm_star if imm_star is not None else cfg["filters"].get("imm_star")
    if istar:
        istar_cfg = cfg_mod.build_imm_config(
            {**cfg, "filters": {**cfg["filters"], "imm_star": istar}}, "imm_star")
        runners["imm_star"] = lambda ep, c=istar_cfg: imm_mod.run_imm(ep, c)

    if params is not None:
        acfg = cfg_mod.build_adaptive_config(cfg)
        runners["maukf"] = lambda ep, p=params, c=acfg: backend.run_adaptive_episode(
            ep, p, c, log_weights=False)
    return runners


def run_benchmark(episode_sets: dict[str, list[Episode]], runners: dict,
                  cfg: dict | None = None, manifest_hash: str = "",
                  cap: float = DIVERGENCE_CAP, threads: int = 1) -> BenchReport:
    """Evaluate every runner on every regime's episode set (paired)."""
    results = {}
    n = 0
    for regime, episodes in episode_sets.items():
        n = max(n, len(episodes))
        for method in METHOD_ORDER:
            if method not in runners:
                continue
            results[(regime, method)] = evaluate_method(
                episodes, runners[method], method, regime, cap, threads)
    return BenchReport(results, n, manifest_hash, cfg or {}, cap)


# ---------------------------------------------------------------------------
# Hyperparameter search (uniform random, logged)
# ---------------------------------------------------------------------------

def _score_config(episodes, runner, cap) -> float:
    res = evaluate_method(episodes, runner, "trial", "tune", cap)
    return res.mean


def tune_ukf(episodes: list[Episode], trials: int, stream: Stream, cfg: dict,
             cap: float = DIVERGENCE_CAP):
    """Random search over (alpha, beta, kappa); returns (best dict, trial log).

    alpha is sampled log-uniformly (the useful range spans three decades);
    beta and kappa uniformly. Divergent trials score the cap, so they lose
    without aborting the search.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    q, r = cfg_mod.filter_noise(cfg)
    model = cfg_mod.build_ukf_config(cfg, "nominal").model
    log_rows = []
    best = None
    for trial in range(trials):
        alpha = float(np.exp(stream.uniform(np.log(1e-2), np.log(30.0))))
        beta = float(stream.uniform(0.0, 5.0))
        kappa = float(stream.uniform(-5.0 + 0.1, 5.0))
        try:
            w = classic_weights(alpha, beta, kappa, 5)
            trial_cfg = UKFConfig(w, q, r, model)
            score = _score_config(
                episodes, lambda ep, c=trial_cfg: backend.run_ukf_episode(ep, c), cap)
        except (ValueError, FilterDivergence):
            score = cap
        row = {"trial": trial, "alpha": alpha, "beta": beta, "kappa": kappa, "armse": score}
        log_rows.append(row)
        if best is None or score < best["armse"]:
            best = row
    return {"alpha": best["alpha"], "beta": best["beta"], "kappa": best["kappa"],
            "armse": best["armse"]}, log_rows


def tune_imm(episodes: list[Episode], trials: int, stream: Stream, cfg: dict,
             cap: float = DIVERGENCE_CAP):
    """Random search over shared mode (alpha, beta, kappa) plus the
    transition-matrix diagonal."""
    if trials < 1:
        raise ValueError("need at least one trial")
    log_rows = []
    best = None
    for trial in range(trials):
        alpha = float(np.exp(stream.uniform(np.log(1e-2), np.log(30.0))))
        beta = float(stream.uniform(0.0, 5.0))
        kappa = float(stream.uniform(-5.0 + 0.1, 5.0))
        pi_diag = float(stream.uniform(0.8, 0.999))
        spec = {"alpha": alpha, "beta": beta, "kappa": kappa, "pi_diag": pi_diag}
        try:
            trial_cfg = cfg_mod.build_imm_config(
                {**cfg, "filters": {**cfg["filters"], "imm_star": spec}}, "imm_star")
            score = _score_config(
                episodes, lambda ep, c=trial_cfg: imm_mod.run_imm(ep, c), cap)
        except (ValueError, FilterDivergence):
            score = cap
        row = {"trial": trial, **spec, "armse": score}
        log_rows.append(row)
        if best is None or score < best["armse"]:
            best = row
    out = {k: best[k] for k in ("alpha", "beta", "kappa", "pi_diag")}
    out["armse"] = best["armse"]
    return out, log_rows


def write_trial_log(rows: list[dict], path) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in rows:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def report_rows(report: BenchReport, timing: bool = False) -> list[dict]:
    """Result table rows. Wall-clock timing is excluded by default so the
    main CSV is byte-reproducible; ask for it explicitly (timing.csv)."""
    rows = []
    for regime in sorted({rg for rg, _ in report.results}):
        for method in METHOD_ORDER:
            res = report.results.get((regime, method))
            if res is None:
                continue
            row = {
                "regime": regime,
                "method": method,
                "n_episodes": len(res.scores_capped),
                "armse_mean": res.mean,
                "armse_std": res.std,
                "armse_mean_completed": res.mean_completed,
                "armse_std_completed": res.std_completed,
                "divergences": res.divergences,
            }
            if timing:
                row["mean_step_time_s"] = res.mean_step_time
            rows.append(row)
    return rows


def write_report_csv(report: BenchReport, path) -> None:
    rows = report_rows(report)
    keys = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["manifest_hash", report.manifest_hash])
        w.writerow(["divergence_cap", repr(report.cap)])
        w.writerow(keys)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keys = rows[2]
    out = []
    for raw in rows[3:]:
        row = {}
        for k, v in zip(keys, raw):
            try:
                row[k] = int(v)
            except ValueError:
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
        out.append(row)
    return out


def write_report_txt(report: BenchReport, path) -> None:
    """Fixed-width summary table, one method per row, one regime per column."""
    regimes = sorted({rg for rg, _ in report.results})
    lines = [f"Monte Carlo benchmark ({report.n_episodes} paired episodes per regime)",
             f"divergence cap: {report.cap:g} m", ""]
    header = f"{'Method':<12}" + "".join(f"{rg + ' ARMSE (m)':>28}" for rg in regimes)
    lines.append(header)
    lines.append("-" * len(header))
    for method in METHOD_ORDER:
        if not any((rg, method) in report.results for rg in regimes):
            continue
        cells = []
        for rg in regimes:
            res = report.results.get((rg, method))
            cells.append(
                f"{res.mean:10.1f} +/- {res.std:8.1f}" if res else " " * 24)
        lines.append(f"{METHOD_LABELS[method]:<12}" + "".join(f"{c:>28}" for c in cells))
    lines.append("")
    for method in METHOD_ORDER:
        for rg in regimes:
            res = report.results.get((rg, method))
            if res and res.divergences:
                lines.append(f"note: {METHOD_LABELS[method]} diverged on "
                             f"{res.divergences} {rg} episodes (scored at cap)")
    Path(path).write_text("\n".join(lines) + "\n")


def plot_trajectories(episode: Episode, tracks: dict[str, Track], out_dir) -> list[Path]:
    """One SVG per method: estimated path over the ground truth."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = []
    for method, track in tracks.items():
        fig, ax = plt.subplots(figsize=(6, 5))
        ax.plot(episode.truth[:, 0], episode.truth[:, 2], "k-", lw=1.5, label="truth")
        ax.plot(track.means[:, 0], track.means[:, 2], "r--", lw=1.2,
                label=METHOD_LABELS.get(method, method))
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.legend()
        ax.set_title(f"{METHOD_LABELS.get(method, method)} on a {episode.regime} episode")
        path = Path(out_dir) / f"trajectory_{method}.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        out.append(path)
    return out


def plot_weight_log(track: Track, out_dir):
    """All 22 weight traces against the step index.

    Returns (path, n_series, n_rows) so callers can cross-check the plot
    against the log it came from.
    """
    if track.weight_log is None:
        return None
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = track.weight_log.shape[1] // 2
    steps = np.arange(1, track.weight_log.shape[0] + 1)
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for i in range(n):
        axes[0].plot(steps, track.weight_log[:, i], lw=0.8)
        axes[1].plot(steps, track.weight_log[:, n + i], lw=0.8)
    axes[0].set_ylabel("mean weights")
    axes[1].set_ylabel("covariance weights")
    axes[1].set_xlabel("step")
    axes[0].set_title("Synthesized sigma-point weights over one episode")
    path = Path(out_dir) / "weights.svg"
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path, 2 * n, int(track.weight_log.shape[0])


def write_timing_csv(report: BenchReport, path) -> None:
    rows = report_rows(report, timing=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["regime", "method", "mean_step_time_s"])
        for row in rows:
            w.writerow([row["regime"], row["method"], repr(row["mean_step_time_s"])])


def emit_report(report: BenchReport, out_dir, sample: tuple[Episode, dict[str, Track]] | None = None):
    """Persist the benchmark: CSV + text table (+ timing side file), plus
    figures when a sample episode with its per-method tracks is supplied.

    report.csv carries only deterministic values: rerunning the same
    configuration reproduces it byte for byte. Wall-clock step times go to
    timing.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out_dir / "report.csv")
    write_report_txt(report, out_dir / "report.txt")
    write_timing_csv(report, out_dir / "timing.csv")
    files = [out_dir / "report.csv", out_dir / "report.txt", out_dir / "timing.csv"]
    if sample is not None:
        episode, tracks = sample
        files += plot_trajectories(episode, tracks, out_dir)
        for track in tracks.values():
            if track.weight_log is not None:
                made = plot_weight_log(track, out_dir)
                if made:
                    files.append(made[0])
                break
    return files

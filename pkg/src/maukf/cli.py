"""Command-line surface.

Verbs:
  gen           generate a dataset (episode files + manifest)
  train         optimize the policy on a generated dataset
  tune          random-search the static filter hyperparameters
  bench         Monte Carlo benchmark of all configured methods
  report        re-emit report files from a saved benchmark CSV
  inspect-ckpt  summarize a policy checkpoint
  perf          compare the pure-Python and compiled backends

Exit codes: 0 success, 1 configuration error, 2 runtime divergence abort,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import backend, bench as bench_mod, config as cfg_mod, dynamics, policy as pol
from .rng import Stream
from .train import TrainAbort, train as train_loop
from .ukf import FilterDivergence

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGENCE = 2
EXIT_IO = 3

log = logging.getLogger("maukf")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maukf", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override the relevant seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker processes for episode fan-out")
    p.add_argument("--episodes", type=int, default=None, help="override episode count")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--regime", choices=[dynamics.REGIME_TRAIN, dynamics.REGIME_WEAVE],
                   default=dynamics.REGIME_TRAIN)
    g.add_argument("--csv", action="store_true", help="also export flat CSVs")

    t = sub.add_parser("train", help="train the adaptive policy")
    t.add_argument("--dataset", type=Path, default=None,
                   help="manifest.json of a generated train-ct dataset (default: generate)")
    t.add_argument("--resume", type=Path, default=None, help="directory of a previous run")
    t.add_argument("--epochs", type=int, default=None)

    u = sub.add_parser("tune", help="random-search UKF* and IMM-UKF* hyperparameters")
    u.add_argument("--trials", type=int, default=None)
    u.add_argument("--skip-imm", action="store_true")

    b = sub.add_parser("bench", help="Monte Carlo benchmark")
    b.add_argument("--dataset", type=Path, default=None,
                   help="manifest.json for the train regime (default: generate)")
    b.add_argument("--checkpoint", type=Path, default=None, help="policy checkpoint")
    b.add_argument("--tuned", type=Path, default=None, help="tuned.json from `tune`")

    r = sub.add_parser("report", help="re-emit report.txt from a report.csv")
    r.add_argument("csv", type=Path)

    i = sub.add_parser("inspect-ckpt", help="summarize a checkpoint")
    i.add_argument("checkpoint", type=Path)

    sub.add_parser("perf", help="compare backends on the hot kernels")
    return p


def _load_cfg(args):
    cfg = cfg_mod.load_config(args.config)
    if args.episodes is not None:
        cfg["bench"]["episodes"] = args.episodes
        cfg["train"]["n_episodes"] = args.episodes
    if args.seed is not None:
        cfg["bench"]["seed"] = args.seed
        cfg["bench"]["tune_seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    return cfg


def _gen_episodes(cfg, regime, count=None):
    n = count if count is not None else cfg["bench"]["episodes"]
    seed = cfg["bench"]["seed"] if regime == dynamics.REGIME_TRAIN else cfg["bench"]["eval_seed"]
    return dynamics.generate_dataset(
        seed, n, regime, cfg["sim"]["t_steps"], cfg["sim"]["dt"],
        cfg_mod.noise_from(cfg, regime))


def cmd_gen(args, cfg) -> int:
    episodes = _gen_episodes(cfg, args.regime)
    out = args.out / args.regime.replace("eval-", "").replace("train-", "dataset-")
    manifest = dynamics.save_manifest(episodes, out, cfg_mod.generation_subset(cfg, args.regime))
    if args.csv:
        for i, ep in enumerate(episodes):
            dynamics.export_episode_csv(ep, out / f"episode_{i:05d}.csv")
    print(f"wrote {len(episodes)} episodes to {out} (manifest: {manifest})")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    tcfg = cfg_mod.build_train_config(cfg)
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.dataset is not None:
        episodes = dynamics.load_manifest(args.dataset)
    else:
        episodes = dynamics.generate_dataset(
            tcfg.seed, tcfg.n_episodes, dynamics.REGIME_TRAIN,
            tcfg.seq_len, cfg["sim"]["dt"], cfg_mod.noise_from(cfg, dynamics.REGIME_TRAIN))
    result = train_loop(episodes, tcfg, out_dir=args.out / "train",
                        filter_cfg=cfg_mod.build_adaptive_config(cfg),
                        resume_from=args.resume)
    print(f"best validation ARMSE: {result.best_val:.3f} m "
          f"(checkpoint: {args.out / 'train' / 'best.ckpt'})")
    return EXIT_OK


def cmd_tune(args, cfg) -> int:
    trials = args.trials if args.trials is not None else cfg["bench"]["tune_trials"]
    tune_eps = dynamics.generate_dataset(
        cfg["bench"]["tune_seed"], cfg["bench"]["tune_episodes"], dynamics.REGIME_TRAIN,
        cfg["sim"]["t_steps"], cfg["sim"]["dt"],
        cfg_mod.noise_from(cfg, dynamics.REGIME_TRAIN))
    args.out.mkdir(parents=True, exist_ok=True)
    best_ukf, rows = bench_mod.tune_ukf(
        tune_eps, trials, Stream(cfg["bench"]["tune_seed"]), cfg,
        cap=cfg["bench"]["divergence_cap"])
    bench_mod.write_trial_log(rows, args.out / "trial_log.csv")
    tuned = {"ukf_star": best_ukf}
    print(f"UKF*: alpha={best_ukf['alpha']:.4g} beta={best_ukf['beta']:.4g} "
          f"kappa={best_ukf['kappa']:.4g} (tuning ARMSE {best_ukf['armse']:.2f} m)")
    if not args.skip_imm:
        n_imm = min(len(tune_eps), cfg["bench"]["tune_episodes_imm"])
        best_imm, imm_rows = bench_mod.tune_imm(
            tune_eps[:n_imm], trials, Stream(cfg["bench"]["tune_seed"] ^ 1), cfg,
            cap=cfg["bench"]["divergence_cap"])
        bench_mod.write_trial_log(imm_rows, args.out / "trial_log_imm.csv")
        tuned["imm_star"] = best_imm
        print(f"IMM-UKF*: alpha={best_imm['alpha']:.4g} beta={best_imm['beta']:.4g} "
              f"kappa={best_imm['kappa']:.4g} pi={best_imm['pi_diag']:.4g} "
              f"(tuning ARMSE {best_imm['armse']:.2f} m)")
    (args.out / "tuned.json").write_text(json.dumps(tuned, indent=1))
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    if args.tuned is not None:
        tuned = json.loads(args.tuned.read_text())
        if tuned.get("ukf_star"):
            cfg["filters"]["ukf_star"] = tuned["ukf_star"]
        if tuned.get("imm_star"):
            cfg["filters"]["imm_star"] = tuned["imm_star"]
    params = None
    ckpt = args.checkpoint or cfg["filters"]["adaptive"]["checkpoint"]
    if ckpt:
        params = pol.load_checkpoint(ckpt)

    manifest_hash = ""
    if args.dataset is not None:
        train_eps = dynamics.load_manifest(args.dataset)
        manifest_hash = json.loads(Path(args.dataset).read_text())["config_hash"]
    else:
        train_eps = _gen_episodes(cfg, dynamics.REGIME_TRAIN)
        manifest_hash = dynamics.config_hash(
            cfg_mod.generation_subset(cfg, dynamics.REGIME_TRAIN))
    weave_eps = _gen_episodes(cfg, dynamics.REGIME_WEAVE, len(train_eps))

    runners = bench_mod.make_runners(cfg, params=params)
    report = bench_mod.run_benchmark(
        {dynamics.REGIME_TRAIN: train_eps, dynamics.REGIME_WEAVE: weave_eps},
        runners, cfg, manifest_hash, cap=cfg["bench"]["divergence_cap"],
        threads=args.threads)

    sample_idx = min(cfg["bench"]["sample_episode"], len(weave_eps) - 1)
    sample_ep = weave_eps[sample_idx]
    sample_tracks = {}
    for name, runner in runners.items():
        try:
            if name == "maukf":
                sample_tracks[name] = backend.run_adaptive_episode(
                    sample_ep, params, cfg_mod.build_adaptive_config(cfg), log_weights=True)
            else:
                sample_tracks[name] = runner(sample_ep)
        except FilterDivergence:
            pass
    files = bench_mod.emit_report(report, args.out, (sample_ep, sample_tracks))
    print(Path(args.out, "report.txt").read_text())
    print("wrote:", ", ".join(str(f) for f in files))
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    rows = bench_mod.read_report_csv(args.csv)
    for row in rows:
        print(f"{row['regime']:<12} {row['method']:<10} "
              f"ARMSE {row['armse_mean']:.1f} +/- {row['armse_std']:.1f} m "
              f"({row['divergences']} divergences)")
    return EXIT_OK


def cmd_inspect(args, cfg) -> int:
    print(json.dumps(pol.checkpoint_summary(args.checkpoint), indent=1))
    return EXIT_OK


def cmd_perf(args, cfg) -> int:
    from . import perf

    rows = perf.compare_backends(cfg)
    print(perf.format_table(rows))
    args.out.mkdir(parents=True, exist_ok=True)
    perf.write_csv(rows, args.out / "perf.csv")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "tune": cmd_tune,
    "bench": cmd_bench,
    "report": cmd_report,
    "inspect-ckpt": cmd_inspect,
    "perf": cmd_perf,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_cfg(args)
    except cfg_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.verb](args, cfg)
    except cfg_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainAbort, FilterDivergence) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

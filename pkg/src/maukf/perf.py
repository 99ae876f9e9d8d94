"""Backend micro-benchmark: pure-Python reference vs compiled core.

Times the three hot kernels (plain UKF episode, adaptive episode, unrolled
episode gradient) on identical inputs and reports per-step / per-episode
wall time for whichever backends are available.
"""

from __future__ import annotations

import csv
import time

import numpy as np

from . import backend, config as cfg_mod, dynamics, policy as pol
from .rng import Stream

__all__ = ["compare_backends", "format_table", "write_csv"]


def _time_repeat(fn, min_reps: int = 3, min_time: float = 0.3):
    reps = 0
    t0 = time.perf_counter()
    while True:
        fn()
        reps += 1
        elapsed = time.perf_counter() - t0
        if reps >= min_reps and elapsed >= min_time:
            return elapsed / reps


def compare_backends(cfg: dict | None = None, t_steps: int = 60, n_warm: int = 2) -> list[dict]:
    cfg = cfg or cfg_mod.load_config(None)
    noise = cfg_mod.noise_from(cfg, dynamics.REGIME_TRAIN)
    ep = dynamics.gen_train_episode(Stream(321), t_steps, cfg["sim"]["dt"], noise)
    params = pol.init_params(Stream(5), cfg_mod.policy_dims(cfg))
    ukf_cfg = cfg_mod.build_ukf_config(cfg, "nominal")
    acfg = cfg_mod.build_adaptive_config(cfg)

    backends = ["py"] + (["cy"] if backend.HAVE_EXT else [])
    kernels = {
        "ukf_episode": lambda be: backend.run_ukf_episode(ep, ukf_cfg, backend=be),
        "adaptive_episode": lambda be: backend.run_adaptive_episode(
            ep, params, acfg, log_weights=False, backend=be),
        "episode_gradient": lambda be: backend.episode_gradient(
            ep, params, 0.1, acfg, backend=be),
    }
    rows = []
    for kernel, fn in kernels.items():
        for be in backends:
            for _ in range(n_warm):
                fn(be)
            per_call = _time_repeat(lambda: fn(be))
            rows.append({
                "kernel": kernel,
                "backend": be,
                "per_episode_ms": per_call * 1e3,
                "per_step_us": per_call / t_steps * 1e6,
            })
    for kernel in kernels:
        times = {r["backend"]: r["per_episode_ms"] for r in rows if r["kernel"] == kernel}
        if "py" in times and "cy" in times:
            for r in rows:
                if r["kernel"] == kernel:
                    r["speedup_vs_py"] = times["py"] / r["per_episode_ms"]
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'kernel':<20}{'backend':<9}{'per episode (ms)':>18}{'per step (us)':>16}{'speedup':>9}"]
    for r in rows:
        sp = f"{r['speedup_vs_py']:.1f}x" if "speedup_vs_py" in r else "-"
        lines.append(f"{r['kernel']:<20}{r['backend']:<9}"
                     f"{r['per_episode_ms']:>18.3f}{r['per_step_us']:>16.2f}{sp:>9}")
    return "\n".join(lines)


def write_csv(rows: list[dict], path) -> None:
    keys = ["kernel", "backend", "per_episode_ms", "per_step_us", "speedup_vs_py"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r.get(k, "") for k in keys])

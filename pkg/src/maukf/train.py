"""End-to-end policy optimization through the unrolled filter.

Each epoch: shuffle the training episodes, walk them in minibatches, sum
per-episode gradients, clip the global norm, take one Adam step. Validation
tracking error is computed on a held-out split and the best checkpoint is
retained. Runs are bit-reproducible for a fixed seed, and a run resumed
from its saved state continues exactly like an uninterrupted one.
"""

from __future__ import annotations

import base64
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend, policy as pol
from .adaptive import AdaptiveConfig
from .dynamics import Episode, NoiseModel
from .rng import Stream
from .ukf import FilterDivergence

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "clip_gradients",
    "episode_loss",
    "train",
    "TrainAbort",
]

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainAbort(RuntimeError):
    """Persistent non-finite gradients; training cannot proceed."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    seq_len: int = 60
    lr: float = 1e-3
    lam_aux: float = 0.1
    truncate: int | None = None        # BPTT truncation length, None = full
    clip_norm: float = 10.0
    seed: int = 1234
    val_fraction: float = 0.1
    checkpoint_every: int = 10
    n_episodes: int = 2000
    gamma: float = pol.DEFAULT_GAMMA

    def __post_init__(self):
        for name in ("epochs", "batch_size", "seq_len", "n_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: pol.PolicyParams) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t) for n, t in params.tensors()},
            v={n: np.zeros_like(t) for n, t in params.tensors()},
        )


def adam_step(params: pol.PolicyParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam; updates params and moments in place."""
    state.step += 1
    b1t = 1.0 - ADAM_BETA1**state.step
    b2t = 1.0 - ADAM_BETA2**state.step
    for name, t in params.tensors():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        t -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale so the global norm is at most clip_norm; direction unchanged."""
    norm = global_norm(grads)
    if clip_norm > 0.0 and norm > clip_norm:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def episode_loss(episode: Episode, params: pol.PolicyParams, lam_aux: float,
                 cfg: AdaptiveConfig):
    """Training loss of one episode (no gradients); see episode_gradient."""
    loss, _, _ = backend.episode_gradient(episode, params, lam_aux, cfg)
    return loss


def _armse_of(means: np.ndarray, episode: Episode) -> float:
    d = means[:, [0, 2]] - episode.truth[1:, [0, 2]]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def validation_armse(episodes, params: pol.PolicyParams, cfg: AdaptiveConfig,
                     cap: float = 1e4) -> float:
    """Mean per-episode tracking ARMSE; diverged episodes score the cap."""
    scores = []
    for ep in episodes:
        try:
            track = backend.run_adaptive_episode(ep, params, cfg, log_weights=False)
            scores.append(min(_armse_of(track.means, ep), cap))
        except FilterDivergence:
            scores.append(cap)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Trainer state persistence (resume support)
# ---------------------------------------------------------------------------

def _pack(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unpack(blob: str, like: np.ndarray) -> np.ndarray:
    return np.frombuffer(base64.b64decode(blob), dtype="<f8").reshape(like.shape).copy()


def save_train_state(path, params: pol.PolicyParams, opt: AdamState,
                     epoch: int, shuffle_state: dict, best_val: float) -> None:
    doc = {
        "epoch": epoch,
        "best_val": best_val,
        "adam_step": opt.step,
        "shuffle_state": shuffle_state,
        "m": {n: _pack(a) for n, a in opt.m.items()},
        "v": {n: _pack(a) for n, a in opt.v.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_train_state(path, params: pol.PolicyParams):
    doc = json.loads(Path(path).read_text())
    opt = AdamState.zeros(params)
    opt.step = doc["adam_step"]
    for n, t in params.tensors():
        opt.m[n] = _unpack(doc["m"][n], t)
        opt.v[n] = _unpack(doc["v"][n], t)
    return opt, doc["epoch"], doc["shuffle_state"], doc["best_val"]


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: pol.PolicyParams          # final parameters
    best_params: pol.PolicyParams     # best-validation parameters
    best_val: float
    history: list[dict] = field(default_factory=list)


def split_dataset(episodes: list[Episode], val_fraction: float):
    n_val = max(1, int(round(len(episodes) * val_fraction)))
    return episodes[:-n_val], episodes[-n_val:]


def train(episodes: list[Episode], config: TrainConfig,
          out_dir=None, init: pol.PolicyParams | None = None,
          filter_cfg: AdaptiveConfig | None = None,
          resume_from=None, log_every: int = 1) -> TrainResult:
    """Optimize the policy on `episodes`; returns final and best parameters.

    `out_dir`, when given, receives training_log.csv, rolling checkpoints,
    the best-validation checkpoint and a resumable trainer state. Episodes
    that produce a non-finite loss or diverge are skipped (and counted);
    if more than 10% of a batch fails, the run aborts with diagnostics.
    """
    if not episodes:
        raise ValueError("empty dataset")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    train_eps, val_eps = split_dataset(episodes, config.val_fraction)
    if filter_cfg is not None:
        cfg = filter_cfg
    else:
        noise = NoiseModel()
        cfg = AdaptiveConfig(
            q=noise.process_cov(episodes[0].dt),
            r=noise.measurement_cov(),
            gamma=config.gamma,
        )
    params = init.copy() if init is not None else pol.init_params(Stream(config.seed))
    opt = AdamState.zeros(params)
    shuffler = Stream(config.seed ^ 0x5FFEED)
    start_epoch = 0
    best_val = np.inf

    if resume_from is not None:
        params = pol.load_checkpoint(Path(resume_from) / "last.ckpt")
        opt, start_epoch, shuffle_state, best_val = load_train_state(
            Path(resume_from) / "train_state.json", params)
        shuffler._gen.bit_generator.state = shuffle_state

    best_params = params.copy()
    history: list[dict] = []
    log_path = out_dir / "training_log.csv" if out_dir is not None else None
    if log_path is not None and not (resume_from and log_path.exists()):
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(
                ["epoch", "train_loss", "val_armse", "grad_norm", "skipped", "wall_time_s"])

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        order = shuffler.shuffle(list(range(len(train_eps))))
        epoch_loss = 0.0
        epoch_norm = 0.0
        n_batches = 0
        n_used = 0
        n_skipped = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grads_sum = {n: np.zeros_like(t) for n, t in params.tensors()}
            batch_loss = 0.0
            batch_bad = 0
            used = 0
            for idx in batch:
                ep = train_eps[idx]
                try:
                    loss, grads, _ = backend.episode_gradient(
                        ep, params, config.lam_aux, cfg, truncate=config.truncate)
                except FilterDivergence as exc:
                    log.warning("skipping episode %d: %s", idx, exc)
                    batch_bad += 1
                    continue
                if not np.isfinite(loss) or any(
                        not np.all(np.isfinite(g)) for g in grads.values()):
                    log.warning("skipping episode %d: non-finite gradient", idx)
                    batch_bad += 1
                    continue
                for n in grads_sum:
                    grads_sum[n] += grads[n]
                batch_loss += loss
                used += 1
            n_skipped += batch_bad
            if batch_bad > 0.1 * len(batch):
                raise TrainAbort(
                    f"epoch {epoch}: {batch_bad}/{len(batch)} episodes in one batch "
                    f"produced unusable gradients")
            if used == 0:
                continue
            norm = clip_gradients(grads_sum, config.clip_norm)
            adam_step(params, grads_sum, opt, config.lr)
            epoch_loss += batch_loss
            epoch_norm += norm
            n_batches += 1
            n_used += used

        val = validation_armse(val_eps, params, cfg)
        wall = time.perf_counter() - t0
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_used, 1),
            "val_armse": val,
            "grad_norm": epoch_norm / max(n_batches, 1),
            "skipped": n_skipped,
            "wall_time_s": wall,
        }
        history.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                                         for k in ("epoch", "train_loss", "val_armse",
                                                   "grad_norm", "skipped", "wall_time_s")])
        if val < best_val:
            best_val = val
            best_params = params.copy()
            if out_dir is not None:
                pol.save_checkpoint(best_params, out_dir / "best.ckpt", seed=config.seed,
                                    extra={"epoch": epoch, "val_armse": val})
        if epoch % log_every == 0:
            log.info("epoch %d: loss %.4g, val ARMSE %.4g m, |g| %.3g, %.1fs",
                     epoch, row["train_loss"], val, row["grad_norm"], wall)
        if out_dir is not None and (
                (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs):
            pol.save_checkpoint(params, out_dir / "last.ckpt", seed=config.seed,
                                extra={"epoch": epoch, "val_armse": val})
            save_train_state(out_dir / "train_state.json", params, opt, epoch + 1,
                             shuffler._gen.bit_generator.state, best_val)

    return TrainResult(params=params, best_params=best_params, best_val=best_val,
                       history=history)

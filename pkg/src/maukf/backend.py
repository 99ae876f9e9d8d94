"""Execution backend selection.

The hot kernels (whole-episode filtering and the unrolled training
gradient) exist twice: a pure-numpy reference implementation and a compiled
core (`maukf._core`, Cython). The compiled core is picked automatically at
import when present; MAUKF_BACKEND=py|cy overrides. Everything outside the
standard turn-model/radar pairing always runs on the reference path.

The two backends agree to floating-point roundoff, not bitwise; parity
tests pin the tolerance. Within one backend, runs are bit-reproducible.
"""

from __future__ import annotations

import os

import numpy as np

from . import adaptive, dynamics, policy as pol, ukf

_forced = os.environ.get("MAUKF_BACKEND")
if _forced not in (None, "py", "cy"):
    raise RuntimeError(f"MAUKF_BACKEND must be 'py' or 'cy', got {_forced!r}")

try:
    from . import _core  # type: ignore[attr-defined]

    HAVE_EXT = True
except ImportError:
    _core = None
    HAVE_EXT = False

if _forced == "cy" and not HAVE_EXT:
    raise RuntimeError("MAUKF_BACKEND=cy but the compiled core is not built")

BACKEND = "py" if _forced == "py" else ("cy" if HAVE_EXT else "py")


def backend_name() -> str:
    return BACKEND


def _is_standard(model: ukf.FilterModel) -> bool:
    return model.f is dynamics.ct_points and model.h is dynamics.radar_points


def _wrapped_flag(model: ukf.FilterModel) -> int:
    return 1 if any(model.angular) else 0


def run_ukf_episode(episode, config: ukf.UKFConfig, belief0=None,
                    backend: str | None = None) -> ukf.Track:
    """Episode filtering, on the compiled core when the model allows it."""
    be = backend or BACKEND
    if be == "cy" and _is_standard(config.model):
        b0 = belief0 if belief0 is not None else ukf.belief_from_first_measurement(episode.meas[0])
        means, covs, innov, fail = _core.run_ukf_episode(
            episode.meas, episode.dt, b0.mean, b0.cov,
            config.weights.w_mean, config.weights.w_cov, config.weights.spread,
            config.q, config.r, _wrapped_flag(config.model),
        )
        if fail >= 0:
            raise ukf.FilterDivergence(fail + 1, "covariance collapse (compiled core)")
        return ukf.Track(means, covs, innov)
    return ukf.run_ukf(episode, config, belief0)


def run_adaptive_episode(episode, params: pol.PolicyParams, cfg: adaptive.AdaptiveConfig,
                         belief0=None, log_weights: bool = True,
                         backend: str | None = None) -> ukf.Track:
    be = backend or BACKEND
    if be == "cy" and _is_standard(cfg.model):
        b0 = belief0 if belief0 is not None else ukf.belief_from_first_measurement(episode.meas[0])
        flat = [np.ascontiguousarray(t) for _, t in params.tensors()]
        means, covs, innov, wlog, fail = _core.run_adaptive_episode(
            episode.meas, episode.dt, b0.mean, b0.cov, flat, cfg.gamma,
            cfg.q, cfg.r, _wrapped_flag(cfg.model), 1 if log_weights else 0,
        )
        if fail >= 0:
            raise ukf.FilterDivergence(fail + 1, "covariance collapse (compiled core)")
        return ukf.Track(means, covs, innov, weight_log=wlog if log_weights else None)
    return adaptive.run_adaptive(episode, params, cfg, belief0, log_weights=log_weights)


def episode_gradient(episode, params: pol.PolicyParams, lam_aux: float,
                     cfg: adaptive.AdaptiveConfig, truncate: int | None = None,
                     backend: str | None = None):
    """Loss and parameter gradients for one unrolled episode.

    Returns (loss, grads dict keyed by tensor name, per-step means).
    """
    be = backend or BACKEND
    if be == "cy" and _is_standard(cfg.model):
        b0 = ukf.belief_from_first_measurement(episode.meas[0])
        flat = [np.ascontiguousarray(t) for _, t in params.tensors()]
        loss, gflat, means, fail = _core.episode_gradient(
            episode.meas, episode.truth, episode.dt, b0.mean, b0.cov, flat,
            cfg.gamma, cfg.q, cfg.r, _wrapped_flag(cfg.model), lam_aux,
            0 if truncate is None else int(truncate),
        )
        if fail >= 0:
            raise ukf.FilterDivergence(fail + 1, "covariance collapse (compiled core)")
        grads = {name: g for (name, _), g in zip(params.tensors(), gflat)}
        return float(loss), grads, means
    taped = adaptive.taped_episode_loss(episode, params, lam_aux, cfg, truncate=truncate)
    wanted = taped.tape.backward(taped.loss_id, list(taped.param_ids.values()))
    grads = {name: wanted[nid] for name, nid in taped.param_ids.items()}
    return float(taped.tape.value(taped.loss_id)), grads, taped.means

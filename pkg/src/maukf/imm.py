"""Interacting-multiple-model filtering over two UKF modes.

Standard IMM recursion: mix the per-mode beliefs with the Markov mode
probabilities, run each mode's UKF predict+update, score each mode by its
Gaussian innovation likelihood (log domain), update the mode probabilities,
and emit the moment-matched mixture as the combined estimate.

The two modes here are constant-velocity and constant-turn. The CV mode is
the turn model with the rotation pinned to zero and a near-zero turn-rate
process noise, so both modes share the same 5-dimensional state and mixing
needs no lifting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import dynamics
from .linalg import cholesky_spd, sym
from .ukf import (
    FilterDivergence,
    FilterModel,
    GaussianBelief,
    STANDARD_MODEL,
    Track,
    UKFConfig,
    UTWeights,
    belief_from_first_measurement,
    predict,
    update,
)

__all__ = ["cv_points", "CV_MODEL", "ImmConfig", "ImmState", "imm_step", "run_imm"]

log = logging.getLogger(__name__)


def cv_points(pts: np.ndarray, dt: float) -> np.ndarray:
    """Straight-line propagation; the turn-rate channel just rides along."""
    out = pts.copy()
    out[0] += dt * pts[1]
    out[2] += dt * pts[3]
    return out


CV_MODEL = FilterModel(
    f=cv_points,
    h=dynamics.radar_points,
    n_x=dynamics.N_X,
    n_z=dynamics.N_Z,
    angular=(False, True),
)


@dataclass(frozen=True)
class ImmConfig:
    """Per-mode UKF configs plus the Markov switching matrix."""

    mode_configs: tuple[UKFConfig, ...]
    transition: np.ndarray          # row-stochastic, transition[i, j] = P(i -> j)
    mu0: np.ndarray | None = None   # initial mode probabilities

    def __post_init__(self):
        pi = np.asarray(self.transition, dtype=float)
        if pi.shape != (len(self.mode_configs),) * 2:
            raise ValueError("transition matrix must be MxM")
        if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("transition matrix rows must be probabilities")


def default_imm_config(q_ct: np.ndarray, q_cv: np.ndarray, r: np.ndarray,
                       alpha=1.0, beta=2.0, kappa=-2.0, pi_diag=0.95,
                       wrapped=True) -> ImmConfig:
    from .ukf import classic_weights

    w = classic_weights(alpha, beta, kappa, dynamics.N_X)
    cv = CV_MODEL if wrapped else CV_MODEL.arithmetic()
    ct = STANDARD_MODEL if wrapped else STANDARD_MODEL.arithmetic()
    pi = np.array([[pi_diag, 1.0 - pi_diag], [1.0 - pi_diag, pi_diag]])
    return ImmConfig(
        mode_configs=(UKFConfig(w, q_cv, r, cv), UKFConfig(w, q_ct, r, ct)),
        transition=pi,
    )


@dataclass
class ImmState:
    beliefs: list[GaussianBelief]
    mu: np.ndarray

    def copy(self) -> "ImmState":
        return ImmState([b.copy() for b in self.beliefs], self.mu.copy())


def _mix(state: ImmState, pi: np.ndarray) -> list[GaussianBelief]:
    """Blend per-mode beliefs by the normalized switching-weighted probabilities."""
    m = len(state.beliefs)
    c = pi.T @ state.mu          # c[j] = sum_i pi[i, j] mu[i]
    mixed = []
    for j in range(m):
        if c[j] <= 0.0:
            # Unreachable mode: keep its own belief; it carries zero weight.
            mixed.append(state.beliefs[j].copy())
            continue
        w = pi[:, j] * state.mu / c[j]
        mean = sum(w[i] * state.beliefs[i].mean for i in range(m))
        cov = np.zeros_like(state.beliefs[0].cov)
        for i in range(m):
            if w[i] == 0.0:
                continue
            d = state.beliefs[i].mean - mean
            cov += w[i] * (state.beliefs[i].cov + np.outer(d, d))
        mixed.append(GaussianBelief(mean, cov))
    return mixed


def _log_gaussian(nu: np.ndarray, pzz: np.ndarray) -> float:
    l = cholesky_spd(pzz)
    alpha = np.linalg.solve(l, nu)
    logdet = 2.0 * np.sum(np.log(np.diag(l)))
    return float(-0.5 * (nu.size * np.log(2.0 * np.pi) + logdet + alpha @ alpha))


def imm_step(state: ImmState, z: np.ndarray, cfg: ImmConfig, dt: float,
             step: int = -1):
    """One mixing + per-mode filtering + reweighting cycle.

    Returns (state', combined_belief). If every mode's likelihood
    underflows, the mode probabilities reset to uniform and filtering
    continues; the event is logged.
    """
    m = len(cfg.mode_configs)
    pi = cfg.transition
    c = pi.T @ state.mu
    mixed = _mix(state, pi)

    loglik = np.empty(m)
    posts = []
    for j, mode_cfg in enumerate(cfg.mode_configs):
        prior, sigma = predict(mixed[j], mode_cfg.weights, mode_cfg.model,
                               mode_cfg.q, dt, step)
        post, nu = update(prior, sigma, mode_cfg.weights, z, mode_cfg.r,
                          mode_cfg.model, step)
        # Innovation covariance for the likelihood, rebuilt from the retained
        # measurement images.
        from .linalg import weighted_scatter
        from .ukf import meas_dev, meas_mean

        zhat = meas_mean(sigma.measured, mode_cfg.weights.w_mean, mode_cfg.model.angular)
        dz = meas_dev(sigma.measured, zhat, mode_cfg.model.angular)
        pzz = weighted_scatter(dz, mode_cfg.weights.w_cov) + mode_cfg.r
        try:
            loglik[j] = _log_gaussian(nu, pzz)
        except np.linalg.LinAlgError:
            loglik[j] = -np.inf
        posts.append(post)

    with np.errstate(divide="ignore"):
        logw = loglik + np.log(c)
    top = np.max(logw)
    if not np.isfinite(top):
        log.warning("imm: all mode likelihoods underflowed at step %d; resetting to uniform", step)
        mu = np.full(m, 1.0 / m)
    else:
        w = np.exp(logw - top)
        mu = w / w.sum()

    mean = np.zeros_like(posts[0].mean)
    for j in range(m):
        if mu[j] > 0.0:
            mean = mean + mu[j] * posts[j].mean
    cov = np.zeros_like(posts[0].cov)
    for j in range(m):
        if mu[j] > 0.0:
            d = posts[j].mean - mean
            cov = cov + mu[j] * (posts[j].cov + np.outer(d, d))
    return ImmState(posts, mu), GaussianBelief(mean, sym(cov))


def run_imm(episode: dynamics.Episode, cfg: ImmConfig,
            belief0: GaussianBelief | None = None) -> Track:
    """Filter a whole episode; the track carries the mode-probability log."""
    if episode.length < 1:
        raise ValueError("empty episode")
    m = len(cfg.mode_configs)
    b0 = belief0.copy() if belief0 is not None else belief_from_first_measurement(episode.meas[0])
    mu0 = np.full(m, 1.0 / m) if cfg.mu0 is None else np.asarray(cfg.mu0, dtype=float).copy()
    state = ImmState([b0.copy() for _ in range(m)], mu0)
    t_steps = episode.length
    n_x = cfg.mode_configs[0].model.n_x
    track = Track(
        means=np.empty((t_steps, n_x)),
        covs=np.empty((t_steps, n_x, n_x)),
        innovations=np.zeros((t_steps, cfg.mode_configs[0].model.n_z)),
        mode_probs=np.empty((t_steps, m)),
    )
    for k in range(t_steps):
        state, combined = imm_step(state, episode.meas[k], cfg, episode.dt, step=k + 1)
        track.means[k] = combined.mean
        track.covs[k] = combined.cov
        track.mode_probs[k] = state.mu
    return track

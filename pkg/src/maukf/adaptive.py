"""The adaptive filter: per-step weight synthesis fused into the UKF cycle.

Each recursive step, in order:

1. draw sigma points at the fixed spread from the current belief,
2. propagate through the motion and measurement models,
3. form a proxy residual against the *previous* step's mean weights
   (breaking the cycle between weight choice and prediction),
4. run the policy (encode, GRU, projection, softmax heads),
5. recombine mean/covariance with the *new* weights,
6. standard gain computation and measurement update.

Both a tape-free fast path (inference, benchmarking) and a recording path
(training) are provided; they call the same forward kernels, so a taped run
reproduces the tape-free run bit-for-bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import dynamics, policy as pol
from .autodiff import Tape, register_op
from .linalg import choose_jitter
from .ukf import (
    STANDARD_MODEL,
    FilterDivergence,
    FilterModel,
    GaussianBelief,
    SigmaSet,
    Track,
    belief_from_first_measurement,
    make_sigma,
    meas_dev,
    meas_mean,
    recombine,
    residual,
    update,
)

__all__ = [
    "AdaptiveConfig",
    "StepDiagnostics",
    "ma_step",
    "run_adaptive",
    "TapedEpisode",
    "taped_episode_loss",
    "export_weight_log_csv",
]


@dataclass(frozen=True)
class AdaptiveConfig:
    q: np.ndarray
    r: np.ndarray
    gamma: float = pol.DEFAULT_GAMMA
    model: FilterModel = STANDARD_MODEL


@dataclass
class StepDiagnostics:
    proxy_residual: np.ndarray
    context: np.ndarray
    w_mean: np.ndarray
    w_cov: np.ndarray
    hidden_norm: float


def ma_step(belief: GaussianBelief, pstate: pol.PolicyState, z: np.ndarray,
            params: pol.PolicyParams, cfg: AdaptiveConfig, dt: float,
            step: int = -1, want_diagnostics: bool = False):
    """One adaptive recursive step.

    Returns (belief', pstate', innovation, diagnostics). The proxy residual
    is recombined with the previous weights; the state/measurement moments
    and the gain use the freshly synthesized ones.
    """
    model = cfg.model
    pts = make_sigma(belief, pstate.w_prev, step)
    prop = model.f(pts, dt)
    zp = model.h(prop)
    zhat_prev = meas_mean(zp, pstate.w_prev.w_mean, model.angular)
    nu_t = residual(z, zhat_prev, model.angular)

    weights, h, c, _ = pol.policy_forward(params, nu_t, pstate.h, cfg.gamma)
    if not (np.all(np.isfinite(weights.w_mean)) and np.all(np.isfinite(weights.w_cov))
            and np.all(np.isfinite(h))):
        raise FilterDivergence(step, "non-finite policy output")

    mean, _, cov = recombine(prop, weights.w_mean, weights.w_cov, cfg.q)
    prior = GaussianBelief(mean, cov)
    sigma = SigmaSet(pts, prop, measured=zp)
    posterior, nu = update(prior, sigma, weights, z, cfg.r, model, step)
    diag = None
    if want_diagnostics:
        diag = StepDiagnostics(nu_t, c, weights.w_mean.copy(), weights.w_cov.copy(),
                               float(np.linalg.norm(h)))
    return posterior, pol.PolicyState(h, weights), nu, diag


def run_adaptive(episode: dynamics.Episode, params: pol.PolicyParams,
                 cfg: AdaptiveConfig, belief0: GaussianBelief | None = None,
                 log_weights: bool = True, log_context: bool = False) -> Track:
    """Filter a whole episode with the policy in the loop.

    The weight log (one row per step: 11 mean weights then 11 covariance
    weights) feeds the weight-evolution plot and the spike analysis.
    Diagnostics beyond the weights are opt-in to keep the hot path lean.
    """
    if episode.length < 1:
        raise ValueError("empty episode")
    dims = params.dims()
    belief = belief0.copy() if belief0 is not None else belief_from_first_measurement(episode.meas[0])
    pstate = pol.initial_state(dims, cfg.gamma)
    t_steps = episode.length
    n_pts = dims.n_pts
    track = Track(
        means=np.empty((t_steps, dims.n_x)),
        covs=np.empty((t_steps, dims.n_x, dims.n_x)),
        innovations=np.empty((t_steps, dims.n_z)),
        weight_log=np.empty((t_steps, 2 * n_pts)) if log_weights else None,
    )
    diagnostics = [] if log_context else None
    for k in range(t_steps):
        belief, pstate, nu, diag = ma_step(
            belief, pstate, episode.meas[k], params, cfg, episode.dt,
            step=k + 1, want_diagnostics=log_context,
        )
        track.means[k] = belief.mean
        track.covs[k] = belief.cov
        track.innovations[k] = nu
        if log_weights:
            track.weight_log[k, :n_pts] = pstate.w_prev.w_mean
            track.weight_log[k, n_pts:] = pstate.w_prev.w_cov
        if log_context:
            diagnostics.append(diag)
    if log_context:
        track.diagnostics = diagnostics
    return track


def export_weight_log_csv(track: Track, path) -> None:
    n = track.weight_log.shape[1] // 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k"] + [f"wm_{i}" for i in range(n)] + [f"wc_{i}" for i in range(n)])
        for k, row in enumerate(track.weight_log):
            w.writerow([k + 1] + [repr(v) for v in row])


# ---------------------------------------------------------------------------
# Domain tape primitives
# ---------------------------------------------------------------------------

def _fw_ct(pts, dt): return dynamics.ct_points(pts, dt), None
def _bw_ct(g, y, iv, cache, aux): return (dynamics.ct_points_vjp(iv[0], aux["dt"], g),)

def _fw_radar(pts): return dynamics.radar_points(pts), None
def _bw_radar(g, y, iv, cache, aux): return (dynamics.radar_points_vjp(iv[0], g),)


def _fw_meas_mean(z_pts, w, angular):
    return meas_mean(z_pts, w, angular), None


def _bw_meas_mean(g, zhat, iv, cache, aux):
    z_pts, w = iv
    gz = np.zeros_like(z_pts)
    gw = np.zeros_like(w)
    for i, ang in enumerate(aux["angular"]):
        gi = g[i]
        if gi == 0.0:
            continue
        if ang:
            cos_t, sin_t = np.cos(z_pts[i]), np.sin(z_pts[i])
            s = np.dot(w, sin_t)
            c = np.dot(w, cos_t)
            norm = s * s + c * c
            gs = (c / norm) * gi
            gc = (-s / norm) * gi
            gw += sin_t * gs + cos_t * gc
            gz[i] = w * (cos_t * gs - sin_t * gc)
        else:
            gw += z_pts[i] * gi
            gz[i] = w * gi
    return gz, gw


def _fw_meas_dev(z_pts, zhat, angular):
    return meas_dev(z_pts, zhat, angular), None


def _bw_meas_dev(g, y, iv, cache, aux):
    return g, -g.sum(axis=1)


def _fw_residual(zhat, z, angular):
    return residual(np.asarray(z, dtype=float), zhat, angular), None


def _bw_residual(g, y, iv, cache, aux):
    return (-g,)


for _n, _f, _b in [
    ("ct_propagate", _fw_ct, _bw_ct),
    ("radar_meas", _fw_radar, _bw_radar),
    ("meas_mean", _fw_meas_mean, _bw_meas_mean),
    ("meas_dev", _fw_meas_dev, _bw_meas_dev),
    ("residual", _fw_residual, _bw_residual),
]:
    register_op(_n, _f, _b)


# ---------------------------------------------------------------------------
# Recording unroll (training path)
# ---------------------------------------------------------------------------

@dataclass
class TapedEpisode:
    tape: Tape
    loss_id: int
    param_ids: dict[str, int]
    means: np.ndarray          # forward track, for validation metrics
    aux_losses: np.ndarray     # per-step auxiliary reconstruction terms
    track_losses: np.ndarray   # per-step squared state errors


def _taped_policy(t: Tape, pid: dict[str, int], nu_id: int, h_prev_id: int):
    a = t.add(t.matmul(pid["w_in"], nu_id), pid["b_in"])
    e = t.relu(t.layernorm(a, pid["ln_in_gain"], pid["ln_in_bias"]))
    au = t.add(t.add(t.matmul(pid["w_u"], e), t.matmul(pid["u_u"], h_prev_id)), pid["b_u"])
    u = t.sigmoid(au)
    ar = t.add(t.add(t.matmul(pid["w_r"], e), t.matmul(pid["u_r"], h_prev_id)), pid["b_r"])
    r = t.sigmoid(ar)
    rh = t.hadamard(r, h_prev_id)
    ah = t.add(t.add(t.matmul(pid["w_h"], e), t.matmul(pid["u_h"], rh)), pid["b_h"])
    hc = t.tanh(ah)
    h = t.add(h_prev_id, t.hadamard(u, t.sub(hc, h_prev_id)))
    ap = t.add(t.matmul(pid["w_proj"], h), pid["b_proj"])
    c = t.relu(t.layernorm(ap, pid["ln_proj_gain"], pid["ln_proj_bias"]))
    wm = t.softmax(t.add(t.matmul(pid["w_head_mean"], c), pid["b_head_mean"]))
    wc = t.softmax(t.add(t.matmul(pid["w_head_cov"], c), pid["b_head_cov"]))
    dec = t.add(t.matmul(pid["w_dec"], c), pid["b_dec"])
    return wm, wc, h, c, dec


def taped_episode_loss(episode: dynamics.Episode, params: pol.PolicyParams,
                       lam_aux: float, cfg: AdaptiveConfig,
                       belief0: GaussianBelief | None = None,
                       truncate: int | None = None) -> TapedEpisode:
    """Record the full unrolled filtering run and its training loss.

    The loss is the summed squared state error plus `lam_aux` times the
    summed squared residual-reconstruction error. With `truncate`, the
    recording is split into segments of that many steps and the carried
    state re-enters each segment as a constant, which cuts gradient flow at
    the boundary while leaving forward values untouched (classic truncated
    backprop-through-time). The default differentiates the entire unroll.

    Returns one tape per call; with truncation the segments live on the
    same Tape object but are bridged by fresh leaves.
    """
    model = cfg.model
    angular = model.angular
    dims = params.dims()
    t_steps = episode.length
    dt = episode.dt
    gamma = cfg.gamma

    t = Tape()
    pid = {name: t.leaf(arr) for name, arr in params.tensors()}
    q_id = t.leaf(cfg.q)
    r_id = t.leaf(cfg.r)

    belief = belief0 if belief0 is not None else belief_from_first_measurement(episode.meas[0])
    x_id = t.leaf(belief.mean)
    p_id = t.leaf(belief.cov)
    h_id = t.leaf(np.zeros(dims.d_h))
    wm_prev_id = t.leaf(np.full(dims.n_pts, 1.0 / dims.n_pts))

    loss_id = t.leaf(np.zeros(()))
    means = np.empty((t_steps, dims.n_x))
    aux_losses = np.empty(t_steps)
    track_losses = np.empty(t_steps)

    for k in range(t_steps):
        if truncate and k > 0 and k % truncate == 0:
            # Segment boundary: re-enter carried state as constants.
            x_id = t.leaf(t.value(x_id))
            p_id = t.leaf(t.value(p_id))
            h_id = t.leaf(t.value(h_id))
            wm_prev_id = t.leaf(t.value(wm_prev_id))

        pm_scaled = t.smul(p_id, gamma)
        jitter = choose_jitter(t.value(pm_scaled))
        l_id = t.cholesky(pm_scaled, jitter)
        pts = t.sigma_spread(x_id, l_id)
        prop = t.apply("ct_propagate", pts, dt=dt)
        zp = t.apply("radar_meas", prop)

        zhat_prev = t.apply("meas_mean", zp, wm_prev_id, angular=angular)
        nu_t = t.apply("residual", zhat_prev, z=tuple(episode.meas[k]), angular=angular)

        wm_id, wc_id, h_id, c_id, dec_id = _taped_policy(t, pid, nu_t, h_id)

        xm = t.matmul(prop, wm_id)
        dev = t.colsub(prop, xm)
        pm = t.add(t.weighted_scatter(dev, wc_id), q_id)
        zhat = t.apply("meas_mean", zp, wm_id, angular=angular)
        dz = t.apply("meas_dev", zp, zhat, angular=angular)
        pzz = t.add(t.weighted_scatter(dz, wc_id), r_id)
        pxz = t.weighted_cross(dev, dz, wc_id)
        gain = t.transpose(t.spd_solve(pzz, t.transpose(pxz)))
        nu = t.apply("residual", zhat, z=tuple(episode.meas[k]), angular=angular)
        x_id = t.add(xm, t.matmul(gain, nu))
        p_id = t.sym(t.sub(pm, t.matmul(t.matmul(gain, pzz), t.transpose(gain))))
        wm_prev_id = wm_id

        err = t.sub(x_id, t.leaf(episode.truth[k + 1]))
        l_track = t.sumsq(err)
        d_aux = t.sub(nu_t, dec_id)
        l_aux = t.sumsq(d_aux)
        step_loss = t.add(l_track, t.smul(l_aux, lam_aux)) if lam_aux != 0.0 else l_track
        loss_id = t.add(loss_id, step_loss)

        means[k] = t.value(x_id)
        track_losses[k] = float(t.value(l_track))
        aux_losses[k] = float(t.value(l_aux))

    return TapedEpisode(t, loss_id, pid, means, aux_losses, track_losses)

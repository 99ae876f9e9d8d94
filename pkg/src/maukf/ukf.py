"""Unscented Kalman filtering with pluggable sigma-point weights.

One engine serves every filter in the package: the classically weighted
baselines, the tuned variants, the IMM mode filters, and the adaptive
filter's inner loop (which supplies externally synthesized weights each
step). The recombination helpers here are also the forward kernels of the
corresponding tape primitives, so taped and tape-free runs share numerics
exactly.

Angular measurement components get circular treatment by default: weighted
recombination through sin/cos, and deviations/innovations wrapped into
(-pi, pi]. Without this, bearing outliers near the branch cut produce
2*pi-scale phantom innovations that no gain can absorb. Plain arithmetic
recombination stays available for strict comparisons.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import dynamics
from .linalg import (
    cholesky_laddered,
    cholesky_spd,
    spd_solve,
    sym,
    weighted_cross,
    weighted_scatter,
    wrap_angle,
)

__all__ = [
    "UTWeights",
    "classic_weights",
    "uniform_weights",
    "GaussianBelief",
    "SigmaSet",
    "FilterModel",
    "STANDARD_MODEL",
    "UKFConfig",
    "FilterDivergence",
    "make_sigma",
    "predict",
    "update",
    "run_ukf",
    "Track",
    "belief_from_first_measurement",
    "default_initial_cov",
    "meas_mean",
    "meas_dev",
    "residual",
]

WEIGHT_SUM_TOL = 1e-12


class FilterDivergence(RuntimeError):
    """Unrecoverable numerical failure inside a filtering run."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"filter diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UTWeights:
    """Mean/covariance weights for 2n+1 sigma points plus the spread scale.

    `spread` is the factor inside the matrix square root: points sit at
    mean +/- columns of chol(spread * P).
    """

    w_mean: np.ndarray
    w_cov: np.ndarray
    spread: float

    def __post_init__(self):
        wm = np.asarray(self.w_mean, dtype=float)
        wc = np.asarray(self.w_cov, dtype=float)
        object.__setattr__(self, "w_mean", wm)
        object.__setattr__(self, "w_cov", wc)
        if wm.shape != wc.shape or wm.ndim != 1:
            raise ValueError("weight vectors must share one shape")
        if self.spread <= 0.0:
            raise ValueError("spread must be positive")
        # scale-aware: near-singular scalings produce cancelling weights of
        # magnitude 1/(n+lambda), and the sum can only be accurate relative
        # to that scale
        tol = WEIGHT_SUM_TOL * max(1.0, float(np.abs(wm).sum()))
        if abs(wm.sum() - 1.0) > tol:
            raise ValueError(f"mean weights sum to {wm.sum()!r}, expected 1")

    @property
    def n_points(self) -> int:
        return self.w_mean.shape[0]

    def require_convex(self) -> "UTWeights":
        if np.any(self.w_mean <= 0.0) or np.any(self.w_cov <= 0.0):
            raise ValueError("convex mode requires strictly positive weights")
        if abs(self.w_cov.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError("convex mode requires covariance weights summing to 1")
        return self


def classic_weights(alpha: float, beta: float, kappa: float, n_x: int) -> UTWeights:
    """Standard scaled-UT weights for the given (alpha, beta, kappa)."""
    lam = alpha**2 * (n_x + kappa) - n_x
    denom = n_x + lam
    if denom == 0.0:
        raise ValueError("n_x + lambda must be nonzero")
    wi = 1.0 / (2.0 * denom)
    wm = np.full(2 * n_x + 1, wi)
    wc = wm.copy()
    # lambda/(n+lambda) written as 1 - 2n*wi so the sum is 1 to the last bit
    wm[0] = 1.0 - 2.0 * n_x * wi
    wc[0] = wm[0] + (1.0 - alpha**2 + beta)
    return UTWeights(wm, wc, spread=denom)


def uniform_weights(n_x: int, spread: float = 3.0) -> UTWeights:
    """Equal convex weights; what a zero-initialized policy head emits."""
    n_pts = 2 * n_x + 1
    w = np.full(n_pts, 1.0 / n_pts)
    return UTWeights(w, w.copy(), spread=spread)


# ---------------------------------------------------------------------------
# Beliefs, models, configs
# ---------------------------------------------------------------------------

@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.cov.copy())


@dataclass
class SigmaSet:
    points: np.ndarray       # (n_x, 2n+1) drawn from the generating belief
    propagated: np.ndarray   # images under f
    measured: np.ndarray | None = None  # images under h


@dataclass(frozen=True)
class FilterModel:
    """Transition/measurement pair acting on column stacks of states."""

    f: Callable[[np.ndarray, float], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    n_x: int
    n_z: int
    angular: tuple[bool, ...]   # which measurement rows are angles

    def arithmetic(self) -> "FilterModel":
        """Strict mode: treat every component as linear, no wrapping."""
        return replace(self, angular=tuple(False for _ in self.angular))


STANDARD_MODEL = FilterModel(
    f=dynamics.ct_points,
    h=dynamics.radar_points,
    n_x=dynamics.N_X,
    n_z=dynamics.N_Z,
    angular=(False, True),
)


def default_initial_cov() -> np.ndarray:
    return np.diag([100.0**2, 30.0**2, 100.0**2, 30.0**2, 0.5**2])


def belief_from_first_measurement(z: np.ndarray, p0: np.ndarray | None = None) -> GaussianBelief:
    """Invert the radar model for position; zero velocity and turn rate.

    The generous default covariance admits the unknown velocity.
    """
    r, b = z
    mean = np.array([r * np.cos(b), 0.0, r * np.sin(b), 0.0, 0.0])
    return GaussianBelief(mean, default_initial_cov() if p0 is None else p0.copy())


@dataclass(frozen=True)
class UKFConfig:
    weights: UTWeights
    q: np.ndarray
    r: np.ndarray
    model: FilterModel = STANDARD_MODEL


# ---------------------------------------------------------------------------
# Unscented transform pieces
# ---------------------------------------------------------------------------

def make_sigma(belief: GaussianBelief, weights: UTWeights, step: int = -1) -> np.ndarray:
    """2n+1 sigma points: mean and mean +/- columns of chol(spread*P)."""
    n = belief.mean.shape[0]
    try:
        l, _ = cholesky_laddered(weights.spread * belief.cov)
    except np.linalg.LinAlgError as exc:
        raise FilterDivergence(step, str(exc)) from exc
    pts = np.empty((n, 2 * n + 1))
    pts[:, 0] = belief.mean
    pts[:, 1:n + 1] = belief.mean[:, None] + l
    pts[:, n + 1:] = belief.mean[:, None] - l
    return pts


def meas_mean(z_pts: np.ndarray, w: np.ndarray, angular) -> np.ndarray:
    """Weighted recombination of measurement images, circular where flagged."""
    out = np.empty(z_pts.shape[0])
    for i, ang in enumerate(angular):
        if ang:
            c = np.dot(w, np.cos(z_pts[i]))
            s = np.dot(w, np.sin(z_pts[i]))
            out[i] = np.arctan2(s, c)
        else:
            out[i] = np.dot(w, z_pts[i])
    return out


def meas_dev(z_pts: np.ndarray, zhat: np.ndarray, angular) -> np.ndarray:
    dev = z_pts - zhat[:, None]
    for i, ang in enumerate(angular):
        if ang:
            dev[i] = wrap_angle(dev[i])
    return dev


def residual(z: np.ndarray, zhat: np.ndarray, angular) -> np.ndarray:
    nu = z - zhat
    for i, ang in enumerate(angular):
        if ang:
            nu[i] = wrap_angle(nu[i])
    return nu


def recombine(points: np.ndarray, wm: np.ndarray, wc: np.ndarray, extra_cov: np.ndarray):
    """State-space recombination: mean, deviations, covariance (+ extra)."""
    mean = points @ wm
    dev = points - mean[:, None]
    cov = weighted_scatter(dev, wc) + extra_cov
    return mean, dev, cov


def predict(belief: GaussianBelief, weights: UTWeights, model: FilterModel,
            q: np.ndarray, dt: float, step: int = -1):
    """Time update: draw sigma points, propagate, recombine."""
    pts = make_sigma(belief, weights, step)
    prop = model.f(pts, dt)
    mean, dev, cov = recombine(prop, weights.w_mean, weights.w_cov, q)
    # No symmetrization here: the posterior is symmetrized every step, and the
    # prior recombination is symmetric to roundoff already. Keeping the prior
    # untouched makes this path bit-identical to the adaptive step.
    return GaussianBelief(mean, cov), SigmaSet(pts, prop)


def update(prior: GaussianBelief, sigma: SigmaSet, weights: UTWeights,
           z: np.ndarray, r: np.ndarray, model: FilterModel, step: int = -1):
    """Measurement update from the retained propagated points.

    Returns (posterior, innovation). The innovation covariance is factored
    once and the gain obtained by two triangular solves; no inverse is ever
    formed.
    """
    z_pts = model.h(sigma.propagated) if sigma.measured is None else sigma.measured
    sigma.measured = z_pts
    wm, wc = weights.w_mean, weights.w_cov
    zhat = meas_mean(z_pts, wm, model.angular)
    dz = meas_dev(z_pts, zhat, model.angular)
    pzz = weighted_scatter(dz, wc) + r
    dev_x = sigma.propagated - prior.mean[:, None]
    pxz = weighted_cross(dev_x, dz, wc)
    try:
        l_zz = cholesky_spd(pzz)
    except np.linalg.LinAlgError as exc:
        raise FilterDivergence(step, f"innovation covariance not SPD: {exc}") from exc
    gain = spd_solve(pzz, pxz.T, chol=l_zz).T
    nu = residual(z, zhat, model.angular)
    mean = prior.mean + gain @ nu
    cov = sym(prior.cov - (gain @ pzz) @ gain.T)
    return GaussianBelief(mean, cov), nu


# ---------------------------------------------------------------------------
# Whole-episode runs
# ---------------------------------------------------------------------------

@dataclass
class Track:
    means: np.ndarray          # (T, n_x)
    covs: np.ndarray           # (T, n_x, n_x)
    innovations: np.ndarray    # (T, n_z)
    weight_log: np.ndarray | None = None   # (T, 2*(2n+1)) adaptive filter only
    mode_probs: np.ndarray | None = None   # (T, M) IMM only

    def position_errors(self, episode: dynamics.Episode) -> np.ndarray:
        d = self.means[:, [0, 2]] - episode.truth[1:, [0, 2]]
        return np.hypot(d[:, 0], d[:, 1])


def run_ukf(episode: dynamics.Episode, config: UKFConfig,
            belief0: GaussianBelief | None = None) -> Track:
    """Filter a whole episode; raises FilterDivergence with the failing step."""
    if episode.length < 1:
        raise ValueError("empty episode")
    belief = belief0.copy() if belief0 is not None else belief_from_first_measurement(episode.meas[0])
    t_steps = episode.length
    n_x, n_z = config.model.n_x, config.model.n_z
    track = Track(
        means=np.empty((t_steps, n_x)),
        covs=np.empty((t_steps, n_x, n_x)),
        innovations=np.empty((t_steps, n_z)),
    )
    for k in range(t_steps):
        prior, sigma = predict(belief, config.weights, config.model, config.q, episode.dt, step=k + 1)
        belief, nu = update(prior, sigma, config.weights, episode.meas[k], config.r, config.model, step=k + 1)
        track.means[k] = belief.mean
        track.covs[k] = belief.cov
        track.innovations[k] = nu
    return track


def export_track_csv(track: Track, episode: dynamics.Episode, path) -> None:
    """Per-step dump: k, state estimate, covariance diagonal, innovation, error."""
    errs = track.position_errors(episode)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = (
            ["k"]
            + [f"xhat_{n}" for n in ("px", "vx", "py", "vy", "omega")]
            + [f"pdiag_{i}" for i in range(track.covs.shape[1])]
            + ["nu_range", "nu_bearing", "pos_error"]
        )
        if track.mode_probs is not None:
            header += [f"mu_{j}" for j in range(track.mode_probs.shape[1])]
        w.writerow(header)
        for k in range(track.means.shape[0]):
            row = (
                [k + 1]
                + [repr(v) for v in track.means[k]]
                + [repr(v) for v in np.diag(track.covs[k])]
                + [repr(v) for v in track.innovations[k]]
                + [repr(errs[k])]
            )
            if track.mode_probs is not None:
                row += [repr(v) for v in track.mode_probs[k]]
            w.writerow(row)

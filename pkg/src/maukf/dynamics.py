"""Target motion and radar measurement simulation.

Two trajectory regimes are generated here:

* ``train-ct``: stochastic constant-turn-rate motion with process noise and
  randomized initial conditions, measured by a range/bearing radar whose
  noise is a two-component Gaussian mixture (nominal + rare scaled "glint"
  outliers).
* ``eval-weave``: deterministic high-agility weave driven by sinusoidal
  Cartesian acceleration with randomized amplitude/frequency, measured with
  a doubled glint scale. This regime is never used for training.

State layout is ``[px, vx, py, vy, omega]`` (positions m, velocities m/s,
turn rate rad/s); measurements are ``[range, bearing]`` with bearing kept in
(-pi, pi].
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import wrap_angle
from .rng import Stream

N_X = 5
N_Z = 2

# Series switch for sin(x)/x style coefficients. Below this the closed forms
# lose digits to cancellation and hit 0/0 at omega = 0.
_SMALL = 1e-4


# ---------------------------------------------------------------------------
# Constant-turn-rate kinematics
# ---------------------------------------------------------------------------

def _ct_coeffs(w, dt):
    """Rotation coefficients A = sin(w dt)/w and B = (1 - cos(w dt))/w.

    Fourth-order Taylor fallback keeps the w -> 0 limit exact (A -> dt,
    B -> 0, i.e. constant velocity).
    """
    w = np.asarray(w, dtype=float)
    x = w * dt
    small = np.abs(x) < _SMALL
    wsafe = np.where(small, 1.0, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        a_exact = np.sin(x) / wsafe
        b_exact = (1.0 - np.cos(x)) / wsafe
    x2 = x * x
    a_ser = dt * (1.0 - x2 / 6.0 * (1.0 - x2 / 20.0))
    b_ser = dt * x * (0.5 - x2 / 24.0)
    return np.where(small, a_ser, a_exact), np.where(small, b_ser, b_exact)


def _ct_coeff_grads(w, dt):
    """dA/domega and dB/domega, with matching series fallback."""
    w = np.asarray(w, dtype=float)
    x = w * dt
    small = np.abs(x) < _SMALL
    wsafe = np.where(small, 1.0, w)
    s, c = np.sin(x), np.cos(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        da_exact = (dt * c * wsafe - s) / (wsafe * wsafe)
        db_exact = (dt * s * wsafe - (1.0 - c)) / (wsafe * wsafe)
    x2 = x * x
    da_ser = dt * dt * x * (-1.0 / 3.0 + x2 / 30.0)
    db_ser = dt * dt * (0.5 - x2 / 8.0)
    return np.where(small, da_ser, da_exact), np.where(small, db_ser, db_exact)


def ct_transition(x: np.ndarray, dt: float) -> np.ndarray:
    """One exact constant-turn step of a single state vector."""
    return ct_points(x.reshape(N_X, 1), dt)[:, 0]


def ct_points(pts: np.ndarray, dt: float) -> np.ndarray:
    """Propagate a (5, m) column stack of states through the turn model.

    Velocity is rotated by omega*dt, position advances along the arc, and
    omega itself is untouched; speed is preserved exactly.
    """
    px, vx, py, vy, w = pts
    a, b = _ct_coeffs(w, dt)
    x = w * dt
    c, s = np.cos(x), np.sin(x)
    out = np.empty_like(pts)
    out[0] = px + a * vx - b * vy
    out[1] = c * vx - s * vy
    out[2] = py + b * vx + a * vy
    out[3] = s * vx + c * vy
    out[4] = w
    return out


def ct_points_vjp(pts: np.ndarray, dt: float, grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of ct_points: J(col)^T @ grad per column."""
    px, vx, py, vy, w = pts
    a, b = _ct_coeffs(w, dt)
    da, db = _ct_coeff_grads(w, dt)
    x = w * dt
    c, s = np.cos(x), np.sin(x)
    g0, g1, g2, g3, g4 = grad_out
    out = np.empty_like(pts)
    out[0] = g0
    out[1] = a * g0 + c * g1 + b * g2 + s * g3
    out[2] = g2
    out[3] = -b * g0 - s * g1 + a * g2 + c * g3
    out[4] = (
        (da * vx - db * vy) * g0
        + dt * (-s * vx - c * vy) * g1
        + (db * vx + da * vy) * g2
        + dt * (c * vx - s * vy) * g3
        + g4
    )
    return out


# ---------------------------------------------------------------------------
# Range/bearing radar
# ---------------------------------------------------------------------------

class OriginError(ValueError):
    """Target at the sensor origin; range/bearing undefined."""


def radar_measure(x: np.ndarray) -> np.ndarray:
    """Noiseless range/bearing of a single state."""
    return radar_points(x.reshape(N_X, 1))[:, 0]


def radar_points(pts: np.ndarray) -> np.ndarray:
    """Measure a (5, m) column stack; returns (2, m) [range; bearing].

    Bearing uses the full-quadrant arctangent: the single-argument form
    drops the quadrant and breaks tracking anywhere left of the sensor.
    """
    px, py = pts[0], pts[2]
    r = np.hypot(px, py)
    if np.any(r < 1e-9):
        raise OriginError("target at sensor origin")
    th = wrap_angle(np.arctan2(py, px))
    return np.stack([r, th])


def radar_points_vjp(pts: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    px, py = pts[0], pts[2]
    r2 = px * px + py * py
    r = np.sqrt(r2)
    gr, gth = grad_out
    out = np.zeros_like(pts)
    out[0] = (px / r) * gr + (-py / r2) * gth
    out[2] = (py / r) * gr + (px / r2) * gth
    return out


# ---------------------------------------------------------------------------
# Noise model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Sensor + process noise description.

    Measurement noise is the mixture (1-eps) N(0, R) + eps N(0, eta R) with
    R = diag(sigma_r^2, sigma_b^2). Process noise is continuous white-noise
    acceleration of strength sigma_a on each position axis plus a turn-rate
    diffusion sigma_omega, discretized at dt.
    """

    sigma_r: float = 10.0
    sigma_b: float = 0.01
    sigma_a: float = 0.5
    sigma_omega: float = 0.05
    glint_prob: float = 0.1
    glint_scale: float = 20.0

    def __post_init__(self):
        if not 0.0 <= self.glint_prob <= 1.0:
            raise ValueError("glint_prob must be a probability")
        if self.glint_scale < 1.0:
            raise ValueError("glint_scale must be >= 1")

    def measurement_cov(self) -> np.ndarray:
        return np.diag([self.sigma_r**2, self.sigma_b**2])

    def measurement_chol(self) -> np.ndarray:
        return np.diag([self.sigma_r, self.sigma_b])

    def process_cov(self, dt: float) -> np.ndarray:
        q = np.zeros((N_X, N_X))
        blk = self.sigma_a**2 * np.array(
            [[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]]
        )
        q[0:2, 0:2] = blk
        q[2:4, 2:4] = blk
        q[4, 4] = self.sigma_omega**2 * dt
        return q

    def process_chol(self, dt: float) -> np.ndarray:
        """Lower factor of process_cov, valid even when a sigma is zero."""
        l = np.zeros((N_X, N_X))
        blk = np.array(
            [
                [np.sqrt(dt**3 / 3.0), 0.0],
                [np.sqrt(3.0 * dt) / 2.0, np.sqrt(dt) / 2.0],
            ]
        )
        l[0:2, 0:2] = self.sigma_a * blk
        l[2:4, 2:4] = self.sigma_a * blk
        l[4, 4] = self.sigma_omega * np.sqrt(dt)
        return l

    def sample_glint(self, stream: Stream) -> np.ndarray:
        """One mixture draw: nominal with prob 1-eps, scaled with prob eps.

        Draw order (pinned): mixture uniform first, then the two normals.
        """
        u = stream.random()
        z = stream.normal(2)
        scale = np.sqrt(self.glint_scale) if u < self.glint_prob else 1.0
        return scale * (self.measurement_chol() @ z)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

REGIME_TRAIN = "train-ct"
REGIME_WEAVE = "eval-weave"

DEFAULT_DT = 0.1
DEFAULT_T = 60


@dataclass
class Episode:
    regime: str
    seed: int
    dt: float
    truth: np.ndarray        # (T+1, 5)
    meas: np.ndarray         # (T, 2)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.truth.shape[0] != self.meas.shape[0] + 1:
            raise ValueError("truth must be one step longer than measurements")

    @property
    def length(self) -> int:
        return self.meas.shape[0]


def _sample_initial_state(stream: Stream) -> np.ndarray:
    """Randomized initial condition shared by both regimes.

    Draw order (pinned): px, py, speed, heading, turn-sign uniform,
    turn magnitude. The turn rate is sampled away from zero so every
    training trajectory is an actual left or right maneuver.
    """
    px = stream.uniform(-1000.0, 1000.0)
    py = stream.uniform(-1000.0, 1000.0)
    speed = stream.uniform(10.0, 30.0)
    heading = stream.uniform(0.0, 2.0 * np.pi)
    sign = 1.0 if stream.random() < 0.5 else -1.0
    omega = sign * stream.uniform(0.1, 0.5)
    return np.array(
        [px, speed * np.cos(heading), py, speed * np.sin(heading), omega]
    )


def _measure_with_glint(truth: np.ndarray, noise: NoiseModel, stream: Stream) -> np.ndarray:
    t_steps = truth.shape[0] - 1
    meas = np.empty((t_steps, N_Z))
    for k in range(1, t_steps + 1):
        z = radar_measure(truth[k]) + noise.sample_glint(stream)
        z[1] = wrap_angle(z[1])
        meas[k - 1] = z
    return meas


def gen_train_episode(stream: Stream, t_steps: int = DEFAULT_T, dt: float = DEFAULT_DT,
                      noise: NoiseModel | None = None) -> Episode:
    """Stochastic constant-turn trajectory with glint-corrupted measurements."""
    if t_steps < 1:
        raise ValueError("need at least one step")
    noise = noise or NoiseModel()
    lq = noise.process_chol(dt)
    truth = np.empty((t_steps + 1, N_X))
    truth[0] = _sample_initial_state(stream)
    for k in range(t_steps):
        truth[k + 1] = ct_transition(truth[k], dt) + lq @ stream.normal(N_X)
    meas = _measure_with_glint(truth, noise, stream)
    return Episode(REGIME_TRAIN, stream.seed, dt, truth, meas)


# -- weave maneuver ---------------------------------------------------------

def _sinc_pair(x):
    """(sin x / x, (cos x - sin x / x) / x) with series below the switch."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SMALL
    xs = np.where(small, 1.0, x)
    with np.errstate(invalid="ignore", divide="ignore"):
        su_exact = np.sin(xs) / xs
        g_exact = (np.cos(xs) - su_exact) / xs
    x2 = x * x
    su_ser = 1.0 - x2 / 6.0 * (1.0 - x2 / 20.0)
    g_ser = x * (-1.0 / 3.0 + x2 / 30.0)
    return np.where(small, su_ser, su_exact), np.where(small, g_ser, g_exact)


def _weave_step_integrals(w: float, t0: float, dt: float, driver: str):
    """Exact integrals of a sinusoidal acceleration over [t0, t0+dt].

    Returns (dv, dp): the velocity gain and the position gain *beyond*
    v0*dt, for unit amplitude. driver is 'sin' or 'cos'. Evaluated in a
    product-of-sines form that stays stable as w -> 0.
    """
    tm = t0 + 0.5 * dt
    su, g = _sinc_pair(0.5 * w * dt)
    sm, cm = np.sin(w * tm), np.cos(w * tm)
    if driver == "sin":
        dv = sm * su * dt
        dp = (sm * su + cm * g) * dt * dt / 2.0
    else:
        dv = cm * su * dt
        dp = (cm * su - sm * g) * dt * dt / 2.0
    return dv, dp


def weave_accel(params: dict, t: float) -> np.ndarray:
    return np.array(
        [
            params["ax"] * np.sin(params["wx"] * t),
            params["ay"] * np.cos(params["wy"] * t),
        ]
    )


def _curvature_rate(vx, vy, ax, ay):
    s2 = vx * vx + vy * vy
    return (vx * ay - vy * ax) / s2 if s2 > 1e-12 else 0.0


def gen_weave_episode(stream: Stream, t_steps: int = DEFAULT_T, dt: float = DEFAULT_DT,
                      noise: NoiseModel | None = None,
                      forced_params: dict | None = None) -> Episode:
    """High-agility weave: sinusoidal acceleration, integrated in closed form.

    Amplitudes are drawn from +/-[10, 20] m/s^2 per axis and frequencies
    from U(-2, 2) rad/s (draw order pinned: ax sign, ax magnitude, ay sign,
    ay magnitude, wx, wy, after the shared initial-state draws). Measurement
    glint uses the evaluation scale (40 by default). The omega channel of the
    truth carries the instantaneous curvature rate implied by the velocity;
    it is reported, never scored, since error metrics are position-only.

    `forced_params` bypasses the maneuver draws (limit-case testing).
    """
    if t_steps < 1:
        raise ValueError("need at least one step")
    noise = noise or NoiseModel(glint_scale=40.0)
    x0 = _sample_initial_state(stream)
    if forced_params is None:
        sx = 1.0 if stream.random() < 0.5 else -1.0
        ax = sx * stream.uniform(10.0, 20.0)
        sy = 1.0 if stream.random() < 0.5 else -1.0
        ay = sy * stream.uniform(10.0, 20.0)
        wx = stream.uniform(-2.0, 2.0)
        wy = stream.uniform(-2.0, 2.0)
        params = {"ax": ax, "ay": ay, "wx": wx, "wy": wy}
    else:
        params = dict(forced_params)
    ax, ay, wx, wy = params["ax"], params["ay"], params["wx"], params["wy"]

    truth = np.empty((t_steps + 1, N_X))
    px, vx, py, vy = x0[0], x0[1], x0[2], x0[3]
    a0 = weave_accel(params, 0.0)
    truth[0] = [px, vx, py, vy, _curvature_rate(vx, vy, a0[0], a0[1])]
    for k in range(t_steps):
        t0 = k * dt
        dvx, dpx = _weave_step_integrals(wx, t0, dt, "sin")
        dvy, dpy = _weave_step_integrals(wy, t0, dt, "cos")
        px += vx * dt + ax * dpx
        py += vy * dt + ay * dpy
        vx += ax * dvx
        vy += ay * dvy
        t1 = t0 + dt
        acc = weave_accel(params, t1)
        truth[k + 1] = [px, vx, py, vy, _curvature_rate(vx, vy, acc[0], acc[1])]
    meas = _measure_with_glint(truth, noise, stream)
    return Episode(REGIME_WEAVE, stream.seed, dt, truth, meas, params)


def generate_dataset(base_seed: int, count: int, regime: str,
                     t_steps: int = DEFAULT_T, dt: float = DEFAULT_DT,
                     noise: NoiseModel | None = None) -> list[Episode]:
    """Episodes i = 0..count-1, each from the stream seeded base_seed XOR i."""
    base = Stream(base_seed)
    gen = gen_train_episode if regime == REGIME_TRAIN else gen_weave_episode
    return [gen(base.derive(i), t_steps, dt, noise) for i in range(count)]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def episode_to_dict(ep: Episode) -> dict:
    return {
        "regime": ep.regime,
        "seed": ep.seed,
        "dt": ep.dt,
        "params": ep.params,
        "truth": ep.truth.tolist(),
        "meas": ep.meas.tolist(),
    }


def episode_from_dict(d: dict) -> Episode:
    return Episode(
        d["regime"],
        int(d["seed"]),
        float(d["dt"]),
        np.asarray(d["truth"], dtype=float),
        np.asarray(d["meas"], dtype=float),
        d.get("params", {}),
    )


def save_episode(ep: Episode, path) -> None:
    Path(path).write_text(json.dumps(episode_to_dict(ep)))


def load_episode(path) -> Episode:
    return episode_from_dict(json.loads(Path(path).read_text()))


def export_episode_csv(ep: Episode, path) -> None:
    """Flat per-step export: k, truth (5 cols), measurement (2 cols)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "px", "vx", "py", "vy", "omega", "z_range", "z_bearing"])
        w.writerow([0, *[repr(v) for v in ep.truth[0]], "", ""])
        for k in range(1, ep.length + 1):
            w.writerow(
                [k]
                + [repr(v) for v in ep.truth[k]]
                + [repr(v) for v in ep.meas[k - 1]]
            )


def config_hash(cfg: dict) -> str:
    """Stable hash of the generation-relevant config subset."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_manifest(episodes: list[Episode], directory, gen_cfg: dict) -> Path:
    """Write one JSON file per episode plus the dataset manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:05d}.json"
        save_episode(ep, directory / name)
        files.append(name)
    manifest = {
        "config_hash": config_hash(gen_cfg),
        "config": gen_cfg,
        "count": len(files),
        "episodes": files,
    }
    mpath = directory / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=1))
    return mpath


def load_manifest(manifest_path) -> list[Episode]:
    mpath = Path(manifest_path)
    manifest = json.loads(mpath.read_text())
    return [load_episode(mpath.parent / name) for name in manifest["episodes"]]

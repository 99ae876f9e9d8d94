"""Independent oracles shared by the test suite.

Everything here is deliberately written without reusing the package's
computational paths: finite differences for gradients, a direct closed-form
Kalman filter for the linear-Gaussian equivalence, and brute-force
integration for the motion models.
"""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-6


def finite_diff_scalar(f, x0: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x0, dtype=float)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-level relative disagreement between two same-shaped arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), floor)
    return float(np.linalg.norm((a - b).ravel()) / denom)


def fd_param_gradient(loss_of_params, params, name: str, step: float = FD_STEP) -> np.ndarray:
    """Finite-difference gradient of a loss w.r.t. one named policy tensor."""
    base = getattr(params, name)
    g = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        pp = params.copy()
        getattr(pp, name)[idx] += step
        pm = params.copy()
        getattr(pm, name)[idx] -= step
        g[idx] = (loss_of_params(pp) - loss_of_params(pm)) / (2.0 * step)
    return g


def kalman_filter(zs, F, H, Q, R, x0, P0, delayed_q: bool = False):
    """Closed-form linear Kalman filter; the oracle for UKF equivalence.

    ``delayed_q=False`` is the textbook recursion. ``delayed_q=True``
    mirrors the sigma-point recursion under test, which reuses the
    propagated points for the measurement update: the innovation moments
    are then built from the pre-noise prior (P_prior - Q). The two coincide
    exactly when Q = 0.
    """
    x = x0.copy()
    P = P0.copy()
    means, covs = [], []
    for z in zs:
        x = F @ x
        P = F @ P @ F.T + Q
        Pm = P - Q if delayed_q else P
        S = H @ Pm @ H.T + R
        K = Pm @ H.T @ np.linalg.inv(S)
        x = x + K @ (z - H @ x)
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        means.append(x.copy())
        covs.append(P.copy())
    return np.array(means), np.array(covs)


def ct_ode_rhs(x):
    """Continuous-time constant-turn dynamics."""
    px, vx, py, vy, w = x
    return np.array([vx, -w * vy, vy, w * vx, 0.0])


def integrate_ct(x0: np.ndarray, dt: float, substeps: int = 1000) -> np.ndarray:
    """RK4 integration of the turn ODE with many substeps."""
    x = x0.astype(float).copy()
    h = dt / substeps
    for _ in range(substeps):
        k1 = ct_ode_rhs(x)
        k2 = ct_ode_rhs(x + 0.5 * h * k1)
        k3 = ct_ode_rhs(x + 0.5 * h * k2)
        k4 = ct_ode_rhs(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x

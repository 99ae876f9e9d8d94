"""Shared dense-matrix kernels.

These functions are the single source of truth for the numerics used by both
the recording (taped) code paths and the tape-free inference paths, which is
what makes the two paths bit-identical: they literally call the same kernels.

Everything is 64-bit. Filtering recursions are too ill-conditioned for
float32: a marginal covariance that still factorizes in float64 routinely
fails in float32, and training requires a valid Cholesky at every step.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "CholeskyError",
    "cholesky_spd",
    "cholesky_laddered",
    "choose_jitter",
    "JITTER_LADDER",
    "spd_solve",
    "spd_solve_right",
    "sym",
    "weighted_scatter",
    "weighted_cross",
    "softmax",
    "layernorm",
    "LAYERNORM_EPS",
    "wrap_angle",
]

LAYERNORM_EPS = 1e-5

# Relative jitter rungs, scaled by trace(M)/n. Escalation past the last rung
# is treated as covariance collapse.
JITTER_LADDER = (0.0, 1e-9, 1e-6, 1e-3)


class CholeskyError(np.linalg.LinAlgError):
    """SPD factorization failed even after jitter escalation."""

    def __init__(self, msg, jitter_tried=None):
        super().__init__(msg)
        self.jitter_tried = jitter_tried


def cholesky_spd(m: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of m + jitter*I.

    Raises numpy.linalg.LinAlgError if the shifted matrix is not positive
    definite. Symmetry of `m` is the caller's contract; only the lower
    triangle is consumed.
    """
    a = m if jitter == 0.0 else m + jitter * np.eye(m.shape[0])
    return np.linalg.cholesky(a)


def cholesky_laddered(m: np.ndarray):
    """Factor an SPD matrix, escalating jitter through JITTER_LADDER.

    The rungs are relative: each is multiplied by trace(m)/n (floored at 1.0
    so a zero-trace matrix still gets an absolute nudge before we give up).
    Returns (L, jitter_used) so a recording caller can replay the exact same
    shifted factorization.
    """
    n = m.shape[0]
    scale = np.trace(m) / n
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    last = None
    for rung in JITTER_LADDER:
        jit = rung * scale
        try:
            return cholesky_spd(m, jit), jit
        except np.linalg.LinAlgError as exc:
            last = exc
    raise CholeskyError(
        f"covariance collapse: Cholesky failed at all jitter rungs (scale={scale:g})",
        jitter_tried=JITTER_LADDER[-1] * scale,
    ) from last


def choose_jitter(m: np.ndarray) -> float:
    """The jitter the ladder would settle on, without keeping the factor.

    Recording code uses this to pick the shift first and then differentiate
    the shifted factorization itself.
    """
    _, jit = cholesky_laddered(m)
    return jit


def spd_solve(s: np.ndarray, b: np.ndarray, chol: np.ndarray | None = None) -> np.ndarray:
    """Solve s @ x = b for SPD s via two triangular solves.

    Never forms an inverse; `chol` lets callers reuse an existing factor.
    """
    l = cholesky_spd(s) if chol is None else chol
    y = solve_triangular(l, b, lower=True)
    return solve_triangular(l.T, y, lower=False)


def spd_solve_right(b: np.ndarray, s: np.ndarray, chol: np.ndarray | None = None) -> np.ndarray:
    """Solve x @ s = b for SPD s, i.e. b @ inv(s)."""
    return spd_solve(s, b.T, chol=chol).T


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def weighted_scatter(dev: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum_i w[i] * dev[:, i] dev[:, i]^T  (outer-product accumulation)."""
    return (dev * w) @ dev.T


def weighted_cross(dx: np.ndarray, dz: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum_i w[i] * dx[:, i] dz[:, i]^T."""
    return (dx * w) @ dz.T


def softmax(v: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis.

    The shift makes the exponentials overflow-safe for the huge logits that
    extreme residuals can induce; outputs are strictly positive and each
    row sums to 1 to machine precision.
    """
    shifted = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layernorm(a: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LAYERNORM_EPS):
    """Feature normalization with learnable affine.

    Normalizes over the last axis using the biased variance, then applies
    gain and bias. Returns (output, xn, inv_std) where xn is the normalized
    pre-affine activation; the extras feed the backward rule.
    """
    mu = np.mean(a, axis=-1, keepdims=True)
    var = np.mean((a - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = (a - mu) * inv
    return gain * xn + bias, xn, inv


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    return a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))

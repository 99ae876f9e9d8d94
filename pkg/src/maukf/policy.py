"""The learned weight-synthesis policy.

A small recurrent hyper-controller maps the history of measurement
residuals to the sigma-point weights used at each filter step:

    residual -> linear + layernorm + relu -> GRU -> projection -> two
    softmax heads (mean weights, covariance weights) + an auxiliary
    residual decoder used only by the training loss.

The softmax heads make both weight vectors strictly positive and sum-to-one
by construction, which keeps every recombined covariance positive
semi-definite no matter what the network does. Head weights start at zero,
so an untrained policy emits exactly uniform weights and the filter
degenerates to a fixed symmetric unscented transform: a sane step-0.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .linalg import layernorm, softmax
from .rng import Stream
from .ukf import UTWeights

__all__ = [
    "PolicyDims",
    "PolicyParams",
    "PolicyState",
    "init_params",
    "encode",
    "gru_step",
    "project",
    "synthesize_weights",
    "aux_decode",
    "policy_forward",
    "initial_state",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_summary",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1
DEFAULT_GAMMA = 3.0


@dataclass(frozen=True)
class PolicyDims:
    n_x: int = 5
    n_z: int = 2
    d_h: int = 32
    d_p: int = 16

    @property
    def n_pts(self) -> int:
        return 2 * self.n_x + 1


@dataclass
class PolicyParams:
    """All learnable tensors, in the pinned field order.

    The field order is load-bearing: initialization draws, gradient
    packing, optimizer state and checkpoints all iterate it.
    """

    w_in: np.ndarray
    b_in: np.ndarray
    ln_in_gain: np.ndarray
    ln_in_bias: np.ndarray
    w_u: np.ndarray
    u_u: np.ndarray
    b_u: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray
    w_proj: np.ndarray
    b_proj: np.ndarray
    ln_proj_gain: np.ndarray
    ln_proj_bias: np.ndarray
    w_head_mean: np.ndarray
    b_head_mean: np.ndarray
    w_head_cov: np.ndarray
    b_head_cov: np.ndarray
    w_dec: np.ndarray
    b_dec: np.ndarray

    def tensors(self):
        """(name, array) pairs in field order."""
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{n: t.copy() for n, t in self.tensors()})

    def dims(self) -> PolicyDims:
        d_h, n_z = self.w_in.shape
        d_p = self.w_proj.shape[0]
        n_pts = self.w_head_mean.shape[0]
        return PolicyDims(n_x=(n_pts - 1) // 2, n_z=n_z, d_h=d_h, d_p=d_p)

    def validate(self) -> None:
        d = self.dims()
        expect = _shapes(d)
        for name, t in self.tensors():
            if t.shape != expect[name]:
                raise ValueError(f"{name}: shape {t.shape}, expected {expect[name]}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name}: non-finite entries")


def _shapes(d: PolicyDims) -> dict[str, tuple]:
    sq = (d.d_h, d.d_h)
    vec = (d.d_h,)
    return {
        "w_in": (d.d_h, d.n_z), "b_in": vec, "ln_in_gain": vec, "ln_in_bias": vec,
        "w_u": sq, "u_u": sq, "b_u": vec,
        "w_r": sq, "u_r": sq, "b_r": vec,
        "w_h": sq, "u_h": sq, "b_h": vec,
        "w_proj": (d.d_p, d.d_h), "b_proj": (d.d_p,),
        "ln_proj_gain": (d.d_p,), "ln_proj_bias": (d.d_p,),
        "w_head_mean": (d.n_pts, d.d_p), "b_head_mean": (d.n_pts,),
        "w_head_cov": (d.n_pts, d.d_p), "b_head_cov": (d.n_pts,),
        "w_dec": (d.n_z, d.d_p), "b_dec": (d.n_z,),
    }


@dataclass
class PolicyState:
    """Per-episode recurrent state: hidden vector and last step's weights."""

    h: np.ndarray
    w_prev: UTWeights


def initial_state(dims: PolicyDims, gamma: float = DEFAULT_GAMMA) -> PolicyState:
    from .ukf import uniform_weights

    return PolicyState(np.zeros(dims.d_h), uniform_weights(dims.n_x, gamma))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _fan_in_uniform(stream: Stream, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[1])
    return stream.uniform(-bound, bound, shape)


def _orthogonal(stream: Stream, n: int) -> np.ndarray:
    """QR of a Gaussian matrix, sign-fixed so the result is unique."""
    a = stream.normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def init_params(stream: Stream, dims: PolicyDims = PolicyDims()) -> PolicyParams:
    """Fresh parameters.

    Input and projection matrices use fan-in uniform scaling, the GRU
    recurrent matrices are orthogonal, biases are zero, layernorm affine is
    identity, and both weight heads are zero (uniform weights at step 0).
    Draw order is the field order.
    """
    d = dims
    p = PolicyParams(
        w_in=_fan_in_uniform(stream, (d.d_h, d.n_z)),
        b_in=np.zeros(d.d_h),
        ln_in_gain=np.ones(d.d_h),
        ln_in_bias=np.zeros(d.d_h),
        w_u=_fan_in_uniform(stream, (d.d_h, d.d_h)),
        u_u=_orthogonal(stream, d.d_h),
        b_u=np.zeros(d.d_h),
        w_r=_fan_in_uniform(stream, (d.d_h, d.d_h)),
        u_r=_orthogonal(stream, d.d_h),
        b_r=np.zeros(d.d_h),
        w_h=_fan_in_uniform(stream, (d.d_h, d.d_h)),
        u_h=_orthogonal(stream, d.d_h),
        b_h=np.zeros(d.d_h),
        w_proj=_fan_in_uniform(stream, (d.d_p, d.d_h)),
        b_proj=np.zeros(d.d_p),
        ln_proj_gain=np.ones(d.d_p),
        ln_proj_bias=np.zeros(d.d_p),
        w_head_mean=np.zeros((d.n_pts, d.d_p)),
        b_head_mean=np.zeros(d.n_pts),
        w_head_cov=np.zeros((d.n_pts, d.d_p)),
        b_head_cov=np.zeros(d.n_pts),
        w_dec=_fan_in_uniform(stream, (d.n_z, d.d_p)),
        b_dec=np.zeros(d.n_z),
    )
    p.validate()
    return p


# ---------------------------------------------------------------------------
# Forward pieces (tape-free; the taped unroll calls the same kernels)
# ---------------------------------------------------------------------------

def encode(params: PolicyParams, nu_t: np.ndarray) -> np.ndarray:
    """Residual feature: relu(layernorm(W nu + b)).

    The normalization is what keeps glint outliers, which can exceed the
    nominal residual scale by orders of magnitude, from saturating the
    recurrent state.
    """
    a = params.w_in @ nu_t + params.b_in
    y, _, _ = layernorm(a, params.ln_in_gain, params.ln_in_bias)
    return np.maximum(y, 0.0)


def gru_step(params: PolicyParams, e: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One gated-recurrent update of the context state."""
    u = _sigmoid(params.w_u @ e + params.u_u @ h_prev + params.b_u)
    r = _sigmoid(params.w_r @ e + params.u_r @ h_prev + params.b_r)
    hc = np.tanh(params.w_h @ e + params.u_h @ (r * h_prev) + params.b_h)
    return h_prev + u * (hc - h_prev)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def project(params: PolicyParams, h: np.ndarray) -> np.ndarray:
    a = params.w_proj @ h + params.b_proj
    y, _, _ = layernorm(a, params.ln_proj_gain, params.ln_proj_bias)
    return np.maximum(y, 0.0)


def synthesize_weights(params: PolicyParams, h: np.ndarray,
                       gamma: float = DEFAULT_GAMMA):
    """Map the hidden state to convex sigma-point weights.

    Two independent softmax heads read the projected context; each output
    vector is strictly positive and sums to one, so the recombined
    covariances stay positive definite. Returns (weights, context).
    """
    c = project(params, h)
    wm = softmax(params.w_head_mean @ c + params.b_head_mean)
    wc = softmax(params.w_head_cov @ c + params.b_head_cov)
    return UTWeights(wm, wc, spread=gamma), c


def aux_decode(params: PolicyParams, c: np.ndarray) -> np.ndarray:
    """Affine reconstruction of the residual from the context."""
    return params.w_dec @ c + params.b_dec


def policy_forward(params: PolicyParams, nu_t: np.ndarray, h_prev: np.ndarray,
                   gamma: float = DEFAULT_GAMMA):
    """Full per-step policy pass: returns (weights, h, c, decoded)."""
    e = encode(params, nu_t)
    h = gru_step(params, e, h_prev)
    weights, c = synthesize_weights(params, h, gamma)
    return weights, h, c, aux_decode(params, c)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _encode_tensor(t: np.ndarray) -> dict:
    return {
        "shape": list(t.shape),
        "data": base64.b64encode(np.ascontiguousarray(t, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_tensor(d: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
    return raw.reshape(d["shape"]).astype(float, copy=True)


def save_checkpoint(params: PolicyParams, path, seed: int | None = None,
                    extra: dict | None = None) -> None:
    """Portable text manifest; tensors are base64 little-endian float64.

    Round-tripping is bit-exact, which the loader relies on for resumable
    training and for the equivalence tests.
    """
    d = params.dims()
    doc = {
        "version": CHECKPOINT_VERSION,
        "dims": {"n_x": d.n_x, "n_z": d.n_z, "d_h": d.d_h, "d_p": d.d_p},
        "seed": seed,
        "tensors": {name: _encode_tensor(t) for name, t in params.tensors()},
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> PolicyParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    params = PolicyParams(**{name: _decode_tensor(d) for name, d in doc["tensors"].items()})
    params.validate()
    return params


def checkpoint_summary(path) -> dict:
    doc = json.loads(Path(path).read_text())
    tensors = {
        name: {"shape": d["shape"], "values": len(base64.b64decode(d["data"])) // 8}
        for name, d in doc["tensors"].items()
    }
    return {
        "version": doc.get("version"),
        "dims": doc.get("dims"),
        "seed": doc.get("seed"),
        "extra": doc.get("extra"),
        "tensors": tensors,
        "total_parameters": sum(v["values"] for v in tensors.values()),
    }

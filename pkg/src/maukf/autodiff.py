"""Reverse-mode automatic differentiation on an append-only tape.

The tape records one unrolled filtering run. Forward values are computed
eagerly at record time by exactly the same kernels the tape-free inference
path uses, so taping never changes numerics. `backward` walks the node list
in reverse, accumulating adjoints; nodes the loss never reaches contribute
zero.

Ops are registered in a module-level table. The generic matrix primitives
live here; domain primitives (turn-model propagation, radar measurement,
angular recombination) are registered by the modules that own their forward
kernels.

One tape belongs to one episode and one execution context. Values are
frozen (read-only) once recorded, so sharing them across threads for
reading is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .linalg import cholesky_spd, layernorm, softmax, spd_solve, sym, weighted_cross, weighted_scatter

__all__ = ["Tape", "Op", "register_op", "NonFiniteError", "TapeError"]


class TapeError(RuntimeError):
    pass


class NonFiniteError(TapeError):
    """An exposed operation produced NaN or Inf."""


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable   # (*input_values, **aux) -> (value, cache)
    backward: Callable  # (grad, value, input_values, cache, aux) -> per-input grads


OPS: dict[str, Op] = {}


def register_op(name: str, forward: Callable, backward: Callable) -> None:
    if name in OPS:
        raise ValueError(f"op {name!r} already registered")
    OPS[name] = Op(name, forward, backward)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    aux: dict = field(default_factory=dict)
    cache: object = None


class Tape:
    """Append-only recording of a computation over float64 arrays."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, nid: int) -> np.ndarray:
        return self.values[nid]

    def leaf(self, value) -> int:
        """Record an input (parameter or constant). The value is copied."""
        v = np.array(value, dtype=float)
        return self._append(Node("leaf", ()), v)

    def apply(self, op_name: str, *ids: int, **aux) -> int:
        op = OPS[op_name]
        vals = [self.values[i] for i in ids]
        value, cache = op.forward(*vals, **aux)
        value = np.asarray(value, dtype=float)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"op {op_name!r} at node {len(self.nodes)} produced non-finite values")
        return self._append(Node(op_name, tuple(ids), aux, cache), value)

    def _append(self, node: Node, value: np.ndarray) -> int:
        for i in node.inputs:
            if not 0 <= i < len(self.nodes):
                raise TapeError("node inputs must reference earlier nodes")
        value.flags.writeable = False
        self.nodes.append(node)
        self.values.append(value)
        return len(self.nodes) - 1

    # Thin wrappers so recorded code reads like ordinary math.
    def add(self, a, b): return self.apply("add", a, b)
    def sub(self, a, b): return self.apply("sub", a, b)
    def smul(self, a, s): return self.apply("smul", a, s=float(s))
    def matmul(self, a, b): return self.apply("matmul", a, b)
    def transpose(self, a): return self.apply("transpose", a)
    def hadamard(self, a, b): return self.apply("hadamard", a, b)
    def tanh(self, a): return self.apply("tanh", a)
    def sigmoid(self, a): return self.apply("sigmoid", a)
    def relu(self, a): return self.apply("relu", a)
    def exp(self, a): return self.apply("exp", a)
    def softmax(self, a): return self.apply("softmax", a)
    def layernorm(self, a, gain, bias): return self.apply("layernorm", a, gain, bias)
    def cholesky(self, m, jitter=0.0): return self.apply("cholesky", m, jitter=float(jitter))
    def spd_solve(self, s, b): return self.apply("spd_solve", s, b)
    def weighted_scatter(self, dev, w): return self.apply("weighted_scatter", dev, w)
    def weighted_cross(self, dx, dz, w): return self.apply("weighted_cross", dx, dz, w)
    def concat(self, a, b, axis=0): return self.apply("concat", a, b, axis=int(axis))
    def slice(self, a, key): return self.apply("slice", a, key=key)
    def sym(self, a): return self.apply("sym", a)
    def sumsq(self, a): return self.apply("sumsq", a)
    def total(self, a): return self.apply("total", a)
    def colsub(self, pts, vec): return self.apply("colsub", pts, vec)
    def sigma_spread(self, mean, l): return self.apply("sigma_spread", mean, l)

    def backward(self, loss_id: int, wanted) -> dict[int, np.ndarray]:
        """Adjoints of `wanted` node ids under the recorded graph."""
        loss_val = self.values[loss_id]
        if loss_val.size != 1:
            raise TapeError("loss node must be scalar")
        grads: list = [None] * len(self.nodes)
        grads[loss_id] = np.ones_like(loss_val)
        for i in range(loss_id, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.op == "leaf":
                continue
            op = OPS[node.op]
            ivals = [self.values[j] for j in node.inputs]
            igrads = op.backward(g, self.values[i], ivals, node.cache, node.aux)
            for j, ig in zip(node.inputs, igrads):
                if ig is None:
                    continue
                if j > i:
                    raise TapeError("cycle detected")  # impossible by construction
                grads[j] = ig if grads[j] is None else grads[j] + ig
        out = {}
        for w in wanted:
            out[w] = grads[w] if grads[w] is not None else np.zeros_like(self.values[w])
        return out

    def replay(self) -> bool:
        """Recompute every forward value; True iff all are bit-identical."""
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                continue
            op = OPS[node.op]
            value, _ = op.forward(*[self.values[j] for j in node.inputs], **node.aux)
            if np.asarray(value).tobytes() != self.values[i].tobytes():
                return False
        return True

    def dump(self, fh=None) -> str:
        """Structured-text graph description for debugging."""
        lines = []
        for i, node in enumerate(self.nodes):
            shape = "x".join(map(str, self.values[i].shape)) or "scalar"
            aux = f" {node.aux}" if node.aux else ""
            lines.append(f"%{i} = {node.op}({', '.join('%%%d' % j for j in node.inputs)}) :: {shape}{aux}")
        text = "\n".join(lines) + "\n"
        if fh is not None:
            fh.write(text)
        return text


# ---------------------------------------------------------------------------
# Generic primitives
# ---------------------------------------------------------------------------

def _fw_add(a, b): return a + b, None
def _bw_add(g, y, iv, cache, aux): return g, g

def _fw_sub(a, b): return a - b, None
def _bw_sub(g, y, iv, cache, aux): return g, -g

def _fw_smul(a, s): return s * a, None
def _bw_smul(g, y, iv, cache, aux): return (aux["s"] * g,)

def _fw_matmul(a, b): return a @ b, None

def _bw_matmul(g, y, iv, cache, aux):
    a, b = iv
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    raise TapeError("unsupported matmul ranks")

def _fw_transpose(a): return a.T, None
def _bw_transpose(g, y, iv, cache, aux): return (g.T,)

def _fw_hadamard(a, b): return a * b, None
def _bw_hadamard(g, y, iv, cache, aux): return g * iv[1], g * iv[0]

def _fw_tanh(a): return np.tanh(a), None
def _bw_tanh(g, y, iv, cache, aux): return (g * (1.0 - y * y),)

def _fw_sigmoid(a): return 1.0 / (1.0 + np.exp(-a)), None
def _bw_sigmoid(g, y, iv, cache, aux): return (g * y * (1.0 - y),)

def _fw_relu(a): return np.maximum(a, 0.0), None
def _bw_relu(g, y, iv, cache, aux): return (g * (y > 0.0),)

def _fw_exp(a): return np.exp(a), None
def _bw_exp(g, y, iv, cache, aux): return (g * y,)

def _fw_softmax(a): return softmax(a), None

def _bw_softmax(g, y, iv, cache, aux):
    dot = np.sum(y * g, axis=-1, keepdims=True)
    out = y * (g - dot)
    return (out.reshape(iv[0].shape),)

def _fw_layernorm(a, gain, bias):
    out, xn, inv = layernorm(a, gain, bias)
    return out, (xn, inv)

def _bw_layernorm(g, y, iv, cache, aux):
    _, gain, _ = iv
    xn, inv = cache
    g_gain = g * xn
    g_bias = g.copy()
    gxn = g * gain
    ga = inv * (gxn - np.mean(gxn) - xn * np.mean(gxn * xn))
    return ga, g_gain, g_bias


def _fw_cholesky(m, jitter=0.0):
    return cholesky_spd(m, jitter), None


def _fold_lower(gfull):
    """Route a full-matrix adjoint onto the lower triangle actually read."""
    return np.tril(gfull, -1) + np.tril(gfull.T, -1) + np.diag(np.diag(gfull))


def _bw_cholesky(g, l, iv, cache, aux):
    phi = np.tril(l.T @ g)
    idx = np.diag_indices_from(phi)
    phi[idx] *= 0.5
    y = solve_triangular(l.T, phi, lower=False)
    gfull = solve_triangular(l.T, y.T, lower=False).T
    return (_fold_lower(gfull),)


def _fw_spd_solve(s, b):
    l = cholesky_spd(s)
    return spd_solve(s, b, chol=l), l


def _bw_spd_solve(g, x, iv, cache, aux):
    s, b = iv
    l = cache
    gb = spd_solve(s, g, chol=l)
    gs_full = -np.outer(gb, x) if x.ndim == 1 else -(gb @ x.T)
    return _fold_lower(gs_full), gb


def _fw_weighted_scatter(dev, w): return weighted_scatter(dev, w), None

def _bw_weighted_scatter(g, y, iv, cache, aux):
    dev, w = iv
    gd = ((g + g.T) @ dev) * w
    gw = np.einsum("ai,ai->i", dev, g @ dev)
    return gd, gw

def _fw_weighted_cross(dx, dz, w): return weighted_cross(dx, dz, w), None

def _bw_weighted_cross(g, y, iv, cache, aux):
    dx, dz, w = iv
    gdz_full = g.T @ dx
    return (g @ dz) * w, gdz_full * w, np.einsum("ai,ai->i", dx, g @ dz)

def _fw_concat(a, b, axis=0): return np.concatenate([a, b], axis=axis), None

def _bw_concat(g, y, iv, cache, aux):
    n = iv[0].shape[aux["axis"]]
    ga, gb = np.split(g, [n], axis=aux["axis"])
    return ga, gb

def _fw_slice(a, key): return a[key].copy(), None

def _bw_slice(g, y, iv, cache, aux):
    out = np.zeros_like(iv[0])
    out[aux["key"]] = g
    return (out,)

def _fw_sym(a): return sym(a), None
def _bw_sym(g, y, iv, cache, aux): return (0.5 * (g + g.T),)

def _fw_sumsq(a): return np.asarray(np.sum(a * a)), None
def _bw_sumsq(g, y, iv, cache, aux): return (2.0 * float(g) * iv[0],)

def _fw_total(a): return np.asarray(np.sum(a)), None
def _bw_total(g, y, iv, cache, aux): return (float(g) * np.ones_like(iv[0]),)


def _fw_colsub(pts, vec):
    return pts - vec[:, None], None


def _bw_colsub(g, y, iv, cache, aux):
    return g, -g.sum(axis=1)


def _fw_sigma_spread(mean, l):
    n = mean.shape[0]
    out = np.empty((n, 2 * n + 1))
    out[:, 0] = mean
    out[:, 1:n + 1] = mean[:, None] + l
    out[:, n + 1:] = mean[:, None] - l
    return out, None


def _bw_sigma_spread(g, y, iv, cache, aux):
    n = iv[0].shape[0]
    gmean = g.sum(axis=1)
    gl = g[:, 1:n + 1] - g[:, n + 1:]
    return gmean, gl


for _name, _fw, _bw in [
    ("add", _fw_add, _bw_add),
    ("sub", _fw_sub, _bw_sub),
    ("smul", _fw_smul, _bw_smul),
    ("matmul", _fw_matmul, _bw_matmul),
    ("transpose", _fw_transpose, _bw_transpose),
    ("hadamard", _fw_hadamard, _bw_hadamard),
    ("tanh", _fw_tanh, _bw_tanh),
    ("sigmoid", _fw_sigmoid, _bw_sigmoid),
    ("relu", _fw_relu, _bw_relu),
    ("exp", _fw_exp, _bw_exp),
    ("softmax", _fw_softmax, _bw_softmax),
    ("layernorm", _fw_layernorm, _bw_layernorm),
    ("cholesky", _fw_cholesky, _bw_cholesky),
    ("spd_solve", _fw_spd_solve, _bw_spd_solve),
    ("weighted_scatter", _fw_weighted_scatter, _bw_weighted_scatter),
    ("weighted_cross", _fw_weighted_cross, _bw_weighted_cross),
    ("concat", _fw_concat, _bw_concat),
    ("slice", _fw_slice, _bw_slice),
    ("sym", _fw_sym, _bw_sym),
    ("sumsq", _fw_sumsq, _bw_sumsq),
    ("total", _fw_total, _bw_total),
    ("colsub", _fw_colsub, _bw_colsub),
    ("sigma_spread", _fw_sigma_spread, _bw_sigma_spread),
]:
    register_op(_name, _fw, _bw)

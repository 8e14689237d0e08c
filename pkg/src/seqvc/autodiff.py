"""Minimal reverse-mode automatic differentiation on numpy arrays.

A dynamic tape is rebuilt on every forward pass: each operation creates a
node that remembers its parents and a closure that accumulates gradient
contributions into preallocated parent buffers. Creation order is a valid
topological order, so backward() just walks nodes by descending id.

Only the operations the sequence-conversion model needs are provided; there
is no general broadcasting beyond what numpy gives elementwise ops, and no
GPU path. Everything is deterministic for fixed inputs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DimensionError,
    InvalidMaskError,
    NumericalError,
    StaleGraphError,
)

DEFAULT_DTYPE = np.float64

_next_id = 0
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Switch the working precision (float64 for tests, float32 optional)."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = dtype.type


def _new_id() -> int:
    global _next_id
    _next_id += 1
    return _next_id


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (used for inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    ``grad`` mirrors the data shape once backward() has reached this tensor;
    for gradient-carrying leaves it starts out as zeros.
    """

    __slots__ = ("data", "grad", "requires_grad", "_id", "_parents", "_bw", "_consumed")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = (), bw: Callable | None = None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(data) if (requires_grad and bw is None) else None
        self._id = _new_id()
        self._parents = parents
        self._bw = bw
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr.copy() if arr is data else arr, requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    return tensor(data, requires_grad=False, dtype=dtype)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE))


class ParameterSet:
    """Ordered, uniquely named collection of gradient-carrying tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.data)

    def n_elements(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy())
        return out


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every gradient-carrying leaf reachable from loss.

    Grads of reached leaves are overwritten (not accumulated across calls),
    so two independent forward/backward cycles give identical results.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise StaleGraphError("backward() called twice on the same graph; re-run the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any gradient-carrying tensor")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        for p in t._parents:
            if p.requires_grad and p._id not in nodes:
                stack.append(p)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n._id, reverse=True):
        g = grads.pop(t._id, None)
        if g is None:
            continue
        if t._bw is None:
            t.grad = g if g.shape == t.data.shape else g.reshape(t.data.shape)
            continue
        bufs = []
        for p in t._parents:
            if p.requires_grad:
                b = grads.get(p._id)
                if b is None:
                    b = np.zeros_like(p.data)
                    grads[p._id] = b
                bufs.append(b)
            else:
                bufs.append(None)
        t._bw(g, bufs)


def _node(data: np.ndarray, parents: Sequence[Tensor], bw: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), bw=bw)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape`` after numpy broadcasting in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g, bufs):
        if bufs[0] is not None:
            bufs[0] += _unbroadcast(g, a.data.shape)
        if bufs[1] is not None:
            bufs[1] += _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g, bufs):
        if bufs[0] is not None:
            bufs[0] += _unbroadcast(g, a.data.shape)
        if bufs[1] is not None:
            bufs[1] -= _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g, bufs):
        if bufs[0] is not None:
            bufs[0] += _unbroadcast(g * b.data, a.data.shape)
        if bufs[1] is not None:
            bufs[1] += _unbroadcast(g * a.data, b.data.shape)

    return _node(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, bufs):
        bufs[0] -= g

    return _node(-a.data, (a,), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g, bufs):
        bufs[0] += c * g

    return _node(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes do not conform: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g, bufs):
        if bufs[0] is not None:
            bufs[0] += g @ b.data.T
        if bufs[1] is not None:
            bufs[1] += a.data.T @ g

    return _node(out, (a, b), bw)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with a shared leading batch axis."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise DimensionError(
            f"batched_matmul shapes do not conform: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g, bufs):
        if bufs[0] is not None:
            bufs[0] += g @ b.data.swapaxes(1, 2)
        if bufs[1] is not None:
            bufs[1] += a.data.swapaxes(1, 2) @ g

    return _node(out, (a, b), bw)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bw(g, bufs):
        bufs[0] += g.transpose(inverse)

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bw(g, bufs):
        bufs[0] += g * (y * (1.0 - y))

    return _node(y, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g, bufs):
        bufs[0] += g * (1.0 - y * y)

    return _node(y, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is defined as 0
    s = np.sign(a.data)

    def bw(g, bufs):
        bufs[0] += g * s

    return _node(np.abs(a.data), (a,), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def bw(g, bufs):
        bufs[0] += g.reshape(a.data.shape)

    return _node(a.data.reshape(shape), (a,), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g, bufs):
        bufs[0][idx] += g

    return _node(np.ascontiguousarray(a.data[idx]), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, bufs):
        for k, buf in enumerate(bufs):
            if buf is not None:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offsets[k], offsets[k + 1])
                buf += g[tuple(idx)]

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def stack_steps(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Stack equal-shape tensors along a new axis (one per time step)."""

    def bw(g, bufs):
        for k, buf in enumerate(bufs):
            if buf is not None:
                buf += np.take(g, k, axis=axis)

    return _node(np.stack([p.data for p in parts], axis=axis), tuple(parts), bw)


def repeat_steps(a: Tensor, repeats: int, axis: int = 1) -> Tensor:
    """Repeat each entry along ``axis`` (upsampling by a reduction factor)."""
    out = np.repeat(a.data, repeats, axis=axis)
    shape = a.data.shape

    def bw(g, bufs):
        gs = g.reshape(shape[:axis] + (shape[axis], repeats) + shape[axis + 1:])
        bufs[0] += gs.sum(axis=axis + 1)

    return _node(out, (a,), bw)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, bufs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        bufs[0] += g

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# fused operations

def softmax_masked(e: Tensor, mask: np.ndarray, axis: int = 0) -> Tensor:
    """Softmax over ``axis`` with masked entries forced to exactly 0.

    For a 2D energy matrix with axis=0 every column of the result sums to 1.
    Max-subtraction makes overflow impossible for finite inputs.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != e.data.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match energies {e.data.shape}")
    if not mask.any(axis=axis).all():
        raise InvalidMaskError("softmax_masked: some slice along the normalization axis is fully masked")
    neg_inf = np.where(mask, e.data, -np.inf)
    m = neg_inf.max(axis=axis, keepdims=True)
    z = np.exp(neg_inf - m)
    y = z / z.sum(axis=axis, keepdims=True)

    def bw(g, bufs):
        dot = (g * y).sum(axis=axis, keepdims=True)
        bufs[0] += y * (g - dot)

    return _node(y, (e,), bw)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the entries of x selected by a same-shape boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match values {x.data.shape}")
    n = int(mask.sum())
    if n == 0:
        raise InvalidMaskError("masked_mean: mask selects no entries")
    out = np.asarray(x.data.sum(where=mask) / n, dtype=x.data.dtype)
    w = mask.astype(x.data.dtype) / n

    def bw(g, bufs):
        bufs[0] += g * w

    return _node(out, (x,), bw)


def weighted_bce_mean(logits: Tensor, targets: np.ndarray, weights: np.ndarray,
                      denom: float) -> Tensor:
    """Binary cross-entropy from logits: sum(w * bce) / denom.

    ``weights`` carries both the positive-class weight and the validity mask
    (0 for padded entries).
    """
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    w = np.asarray(weights, dtype=z.dtype)
    if t.shape != z.shape or w.shape != z.shape:
        raise DimensionError(
            f"bce shapes do not match: logits {z.shape}, targets {t.shape}, weights {w.shape}")
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((w * (softplus - z * t)).sum() / denom, dtype=z.dtype)

    def bw(g, bufs):
        # exp(-|z|) never overflows, so both halves of the stable form are safe
        ez = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
        bufs[0] += g * w * (sig - t) / denom

    return _node(out, (logits,), bw)


def gru_step_pre(gx: Tensor, h_prev: Tensor, wh: Tensor, whc: Tensor) -> Tensor:
    """One gated recurrent update with the input projection precomputed.

    gx = x @ Wx + b stacked as [update | reset | candidate] along the last
    axis. Fused into a single tape node because this is the training hot path.
    """
    hidden = h_prev.data.shape[-1]
    if gx.data.shape[-1] != 3 * hidden:
        raise DimensionError(
            f"gate projection {gx.data.shape} does not match hidden state {h_prev.data.shape}")
    h = h_prev.data
    hz = h @ wh.data
    z = 1.0 / (1.0 + np.exp(-(gx.data[:, :hidden] + hz[:, :hidden])))
    r = 1.0 / (1.0 + np.exp(-(gx.data[:, hidden:2 * hidden] + hz[:, hidden:])))
    rh = r * h
    c = np.tanh(gx.data[:, 2 * hidden:] + rh @ whc.data)
    out = h + z * (c - h)

    def bw(g, bufs):
        dz = g * (c - h) * z * (1.0 - z)
        dgc = g * z * (1.0 - c * c)
        dh = g * (1.0 - z)
        drh = dgc @ whc.data.T
        dr = drh * h * r * (1.0 - r)
        dh += drh * r
        dzr = np.concatenate([dz, dr], axis=1)
        dh += dzr @ wh.data.T
        if bufs[0] is not None:
            bufs[0][:, :hidden] += dz
            bufs[0][:, hidden:2 * hidden] += dr
            bufs[0][:, 2 * hidden:] += dgc
        if bufs[1] is not None:
            bufs[1] += dh
        if bufs[2] is not None:
            bufs[2] += h.T @ dzr
        if bufs[3] is not None:
            bufs[3] += rh.T @ dgc

    return _node(out, (gx, h_prev, wh, whc), bw)


# ---------------------------------------------------------------------------
# composed layers

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on the last axis: x @ w + b."""
    if x.data.shape[-1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"linear shapes do not conform: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")
    if x.data.ndim == 2:
        return add(matmul(x, w), b)
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, x.data.shape[-1]))
    return reshape(add(matmul(flat, w), b), lead + (w.data.shape[1],))


def glu(x: Tensor) -> Tensor:
    """Gated linear unit on the last axis: first half times sigmoid(second half)."""
    last = x.data.shape[-1]
    if last % 2 != 0:
        raise DimensionError(f"glu needs an even last dimension, got shape {x.data.shape}")
    h = last // 2
    axis = x.data.ndim - 1
    return mul(narrow(x, axis, 0, h), sigmoid(narrow(x, axis, h, h)))


def recurrent_step(x_t: Tensor, h_prev: Tensor, theta: ParameterSet, prefix: str = "") -> Tensor:
    """Gated recurrent update h = (1-z)*h_prev + z*candidate.

    Reads Wx (in x 3H), Wh (H x 2H), Whc (H x H), b (3H) from ``theta`` under
    the given name prefix. Differentiable through time via the tape.
    """
    wx, wh = theta[prefix + "Wx"], theta[prefix + "Wh"]
    whc, b = theta[prefix + "Whc"], theta[prefix + "b"]
    if x_t.data.shape[-1] != wx.data.shape[0] or h_prev.data.shape[-1] * 3 != wx.data.shape[1]:
        raise DimensionError(
            f"recurrent_step shapes do not conform: x {x_t.data.shape}, "
            f"h {h_prev.data.shape}, Wx {wx.data.shape}")
    return gru_step_pre(linear(x_t, wx, b), h_prev, wh, whc)


def l1_masked(y_hat: Tensor, y: Tensor, mask: np.ndarray) -> Tensor:
    """Mean absolute difference over valid frames (per-element convention)."""
    if y_hat.data.shape != y.data.shape:
        raise DimensionError(f"l1_masked shapes differ: {y_hat.data.shape} vs {y.data.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == y.data.shape[:-1]:
        mask = np.broadcast_to(mask[..., None], y.data.shape)
    if mask.shape != y.data.shape:
        raise DimensionError(f"l1_masked mask shape {mask.shape} does not match {y.data.shape}")
    if not mask.any():
        raise InvalidMaskError("l1_masked: no valid frames")
    return masked_mean(absolute(sub(y_hat, y)), mask)


# ---------------------------------------------------------------------------
# verification oracle

def grad_check(f: Callable[[ParameterSet], Tensor], theta: ParameterSet,
               eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    Per coordinate: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    ``f`` must be deterministic; run this in 64-bit.
    """
    loss = f(theta)
    if not np.isfinite(loss.data):
        raise NumericalError("grad_check: non-finite loss at the base point")
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in theta.items()}

    worst = 0.0
    with no_grad():
        for name, t in theta.items():
            flat = t.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                lp = float(f(theta).data)
                flat[i] = orig - eps
                lm = float(f(theta).data)
                flat[i] = orig
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise NumericalError(
                        f"grad_check: non-finite loss while perturbing {name}[{i}]")
                numeric = (lp - lm) / (2.0 * eps)
                err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1e-8)
                if err > worst:
                    worst = err
    return worst

"""Dense tensors with a dynamically recorded reverse-mode tape.

Ops are coarse-grained (matmul, softmax, layer norm, embedding lookup,
cross entropy) so the tape stays short and finite-difference checking stays
tractable. Everything runs in float32 by default; ops follow the dtype of
their inputs, which lets the gradient checker run the same code in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

NEG_INF = -1e9  # additive attention mask value, safe in float32


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    """A loss was asked to average over zero contributing positions."""


class NonFiniteError(FloatingPointError):
    pass


# -----------------------------------------------------------------------------
# Tape machinery
# -----------------------------------------------------------------------------

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array plus an optional gradient buffer of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: np.ndarray = _as_float_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- introspection --------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward pass --------------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from a scalar; accumulates into `.grad` buffers."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -----------------------------------------------------------------------------
# Elementwise and linear ops
# -----------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b with numpy broadcasting; b may be a Tensor or a constant."""
    if isinstance(b, Tensor):
        out_data = a.data + b.data

        def backward(g):
            _accum(a, g)
            _accum(b, g)

        return _make(out_data, (a, b), backward)
    const = np.asarray(b)
    out_data = a.data + const

    def backward(g):
        _accum(a, g)

    return _make(out_data, (a,), backward)


def mul(a: Tensor, b) -> Tensor:
    """a * b elementwise; b may be a Tensor or a constant."""
    if isinstance(b, Tensor):
        out_data = a.data * b.data

        def backward(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _make(out_data, (a, b), backward)
    const = np.asarray(b)
    out_data = a.data * const

    def backward(g):
        _accum(a, g * const)

    return _make(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product over the last two axes."""
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _make(out_data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = a.data * mask

    def backward(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    out_data = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(out_data, (a,), backward)


def take_index(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along `axis`, dropping that axis (e.g. x[:, 0, :])."""
    out_data = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        _accum(a, full)

    return _make(out_data, (a,), backward)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Row/element select by a constant boolean mask; gradient routes by mask."""
    cond = np.asarray(cond, dtype=bool)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        _accum(a, g * cond)
        _accum(b, g * ~cond)

    return _make(out_data, (a, b), backward)


# -----------------------------------------------------------------------------
# Lookup / gather ops
# -----------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table (V, d), ids int (...) -> (..., d)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out_data = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(out_data, (table,), backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along the position axis.

    a (S, d) with idx (T,) -> (T, d); a (B, S, d) with idx (B, T) -> (B, T, d).
    """
    idx = np.asarray(idx)
    if a.data.ndim == 2:
        out_data = a.data[idx]

        def backward(g):
            if not a.requires_grad:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

        return _make(out_data, (a,), backward)
    if a.data.ndim == 3 and idx.ndim == 2:
        out_data = np.take_along_axis(a.data, idx[:, :, None], axis=1)
        batch = np.arange(a.data.shape[0])[:, None]

        def backward(g):
            if not a.requires_grad:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, (batch, idx), g)

        return _make(out_data, (a,), backward)
    raise ShapeError(f"gather_rows: unsupported shapes {a.shape} / {idx.shape}")


# -----------------------------------------------------------------------------
# Normalization and probability ops
# -----------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        _accum(gain, g * xhat)
        _accum(bias, g)
        gx = g * gain.data
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, dx)

    return _make(out_data, (x, gain, bias), backward)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    position_mask: Optional[np.ndarray] = None,
    label_smoothing: float = 0.0,
) -> Tensor:
    """Mean negative log-probability over positions where `position_mask` is true.

    logits (..., V), targets int (...). Gradient at excluded positions is
    exactly zero. With smoothing eps the target distribution becomes
    (1-eps)*onehot + eps/V.
    """
    vocab = logits.data.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} != logits {logits.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ShapeError(f"targets out of range [0, {vocab})")
    if position_mask is None:
        position_mask = np.ones(targets.shape, dtype=bool)
    else:
        position_mask = np.asarray(position_mask, dtype=bool)
        if position_mask.shape != targets.shape:
            raise ShapeError("position_mask shape mismatch")
    n = int(position_mask.sum())
    if n == 0:
        raise DegenerateBatchError("all positions excluded from the loss")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz  # (..., V)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    if label_smoothing > 0.0:
        eps = label_smoothing
        smooth = -logp.mean(axis=-1)
        per_pos = (1.0 - eps) * nll + eps * smooth
    else:
        per_pos = nll
    loss = (per_pos * position_mask).sum() / n
    out_data = np.asarray(loss, dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(logp)
        q = np.zeros_like(p)
        np.put_along_axis(q, targets[..., None], 1.0, axis=-1)
        if label_smoothing > 0.0:
            q = (1.0 - label_smoothing) * q + label_smoothing / vocab
        weight = position_mask.astype(logits.data.dtype) / n
        _accum(logits, (p - q) * weight[..., None] * g)

    return _make(out_data, (logits,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller only applies this in training mode."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out_data = x.data * keep

    def backward(g):
        _accum(x, g * keep)

    return _make(out_data, (x,), backward)

"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model operation in this library is assembled from the primitives
here. Storage is a row-major numpy float64 array; broadcasting follows
numpy's trailing-dimension rules. Operations record themselves onto the
innermost active :class:`Tape`; ``backward`` replays the recorded local
rules in reverse execution order and accumulates (``+=``) into ``grad``
buffers. Outside a tape nothing is recorded, so inference on frozen
parameters carries no graph overhead.

A tape and the tensors produced on it belong to one worker at a time;
there is no internal locking.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import (
    EmbeddingIndexError,
    NumericError,
    ShapeError,
    TapeError,
)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Innermost entry is the active tape. Deliberately not thread-local:
# callers must confine a tape to a single worker.
_TAPE_STACK: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward().

    Use as a context manager around a forward pass::

        with Tape():
            loss = model_loss(params, batch)
            loss.backward()
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        """Release all recorded nodes and allow a fresh backward pass."""
        self._nodes.clear()
        self._used = False


class _Node:
    """One executed operation: inputs, output, and its local backward rule."""

    __slots__ = ("out", "inputs", "rule", "tape")

    def __init__(self, out, inputs, rule, tape):
        self.out = out
        self.inputs = inputs  # Tensor inputs only, aligned with rule output
        self.rule = rule  # rule(g) -> list of grad arrays (or None) per input
        self.tape = tape


def _is_tracked(t) -> bool:
    return isinstance(t, Tensor) and (t.requires_grad or t.node is not None)


def _record(out: "Tensor", inputs: tuple, rule) -> "Tensor":
    tape = _active_tape()
    if tape is None or not any(_is_tracked(t) for t in inputs):
        return out
    node = _Node(out, inputs, rule, tape)
    out.node = node
    tape._nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """N-dimensional float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        """The underlying array. Do not mutate while a tape is active."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor":
        """A tape-free copy of the current values."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    # -- backward --------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every participating tensor behind this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self.node is None:
            raise TapeError("tensor is detached from any tape; nothing to differentiate")
        tape = self.node.tape
        if tape._used:
            raise TapeError("backward() already ran on this tape; call clear() or use a fresh tape")
        tape._used = True
        self.grad = np.ones_like(self.data)
        for node in reversed(tape._nodes):
            g = node.out.grad
            if g is None:
                continue
            for t, dg in zip(node.inputs, node.rule(g)):
                if dg is None or not _is_tracked(t):
                    continue
                if t.grad is None:
                    t.grad = dg.copy()
                else:
                    t.grad += dg


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def zero_grads(params) -> None:
    """Reset the grad buffer of every tensor in ``params`` to zeros."""
    for t in params:
        t.zero_grad()


# -- elementwise suite ----------------------------------------------------


def add(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    try:
        out = Tensor(ad + bd)
    except ValueError:
        raise ShapeError(f"add: shapes {ad.shape} and {bd.shape} do not broadcast") from None

    def rule(g):
        return (
            _unbroadcast(g, ad.shape) if isinstance(a, Tensor) else None,
            _unbroadcast(g, bd.shape) if isinstance(b, Tensor) else None,
        )

    return _record(out, (a, b), rule)


def sub(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    try:
        out = Tensor(ad - bd)
    except ValueError:
        raise ShapeError(f"sub: shapes {ad.shape} and {bd.shape} do not broadcast") from None

    def rule(g):
        return (
            _unbroadcast(g, ad.shape) if isinstance(a, Tensor) else None,
            _unbroadcast(-g, bd.shape) if isinstance(b, Tensor) else None,
        )

    return _record(out, (a, b), rule)


def mul(a, b) -> Tensor:
    ad, bd = _as_array(a), _as_array(b)
    try:
        out = Tensor(ad * bd)
    except ValueError:
        raise ShapeError(f"mul: shapes {ad.shape} and {bd.shape} do not broadcast") from None

    def rule(g):
        return (
            _unbroadcast(g * bd, ad.shape) if isinstance(a, Tensor) else None,
            _unbroadcast(g * ad, bd.shape) if isinstance(b, Tensor) else None,
        )

    return _record(out, (a, b), rule)


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast as stacked matrices."""
    ad, bd = _as_array(a), _as_array(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {ad.shape} and {bd.shape}")
    try:
        out = Tensor(ad @ bd)
    except ValueError:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not broadcast") from None

    def rule(g):
        ga = gb = None
        if isinstance(a, Tensor):
            ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        if isinstance(b, Tensor):
            gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _record(out, (a, b), rule)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = Tensor(xd.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape),)

    return _record(out, (x,), rule)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    count = xd.size if axis is None else xd.shape[axis]
    out = Tensor(xd.mean(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xd.shape),)

    return _record(out, (x,), rule)


# -- shape manipulation ----------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def rule(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), rule)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(x.data.swapaxes(a, b))

    def rule(g):
        return (g.swapaxes(a, b),)

    return _record(out, (x,), rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    try:
        out = Tensor(np.concatenate(datas, axis=axis))
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[d.shape for d in datas]} do not align on axis {axis}"
        ) from None
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, axis)
            for i in range(len(datas))
        )

    return _record(out, tuple(tensors), rule)


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Single-index selection along ``axis`` (the axis is dropped)."""
    out = Tensor(np.take(x.data, index, axis=axis))

    def rule(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _record(out, (x,), rule)


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        out = Tensor(np.broadcast_to(x.data, shape).copy())
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None

    def rule(g):
        return (_unbroadcast(g, x.data.shape),)

    return _record(out, (x,), rule)


# -- nonlinearities ---------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rows sum to one."""
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericError("softmax: input contains non-finite values")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    out = Tensor(e)
    y = out.data

    def rule(g):
        gy = g * y
        return (gy - y * gy.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), rule)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def rule(g):
        return (g * (x.data > 0.0),)

    return _record(out, (x,), rule)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact standard-normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor(xd * cdf)

    def rule(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _record(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    d = x.data.shape[-1]
    gd, bd = _as_array(gamma), _as_array(beta)
    if gd.shape != (d,) or bd.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gd.shape} and {bd.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gd * xhat + bd)

    def rule(g):
        gx = None
        if isinstance(x, Tensor):
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
            )
        ggamma = _unbroadcast(g * xhat, gd.shape) if isinstance(gamma, Tensor) else None
        gbeta = _unbroadcast(g, bd.shape) if isinstance(beta, Tensor) else None
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), rule)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout: E[output] equals the input elementwise."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * mask)

    def rule(g):
        return (g * mask,)

    return _record(out, (x,), rule)


def gather(table: Tensor, index) -> Tensor:
    """Row lookup into an embedding table.

    ``index`` is a python int (returns one row) or an integer array
    (returns one row per entry). The backward rule accumulates the
    upstream gradient into the selected rows only.
    """
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-d, got shape {table.shape}")
    n_rows = table.shape[0]
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise EmbeddingIndexError(f"gather: indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx.reshape(-1)[np.argmax((idx < 0) | (idx >= n_rows))]
        raise EmbeddingIndexError(
            f"gather: index {int(bad)} out of range for table with {n_rows} rows"
        )
    out = Tensor(table.data[idx])

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), rule)


# -- verification -----------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare the tape gradient of scalar ``f(x)`` against central differences.

    Perturbs every coordinate of ``x`` in place (restoring it), evaluates
    (f(x+eps*e_i) - f(x-eps*e_i)) / 2*eps, and returns the largest relative
    error against the analytic gradient, with an absolute floor of 1e-8
    guarding the denominator.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")

    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape():
            out = f(x)
            if not isinstance(out, Tensor) or out.data.size != 1:
                raise ShapeError("grad_check: f must return a scalar tensor")
            out.backward()
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).copy()
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))

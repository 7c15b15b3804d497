"""Tape-based reverse-mode automatic differentiation over float64 numpy buffers.

Every forward op records its parents and a backward closure on the tensor it
produces; ``Tensor.backward`` walks the recorded graph once in reverse
topological order. The op vocabulary is fixed and small: exactly what MLPs,
layer normalization, multi-head cross-attention, and the planning losses need.
All buffers are float64; no implicit downcasts anywhere.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "NumericError",
    "no_grad",
    "concat",
    "affine",
    "bce_with_logits",
    "gradient_check",
    "GradCheckReport",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class NumericError(RuntimeError):
    """A non-finite value appeared where a finite one is required."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient `g` down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A float64 ndarray plus the graph bookkeeping reverse mode needs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        """Copy of the underlying buffer, detached from the graph."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ---------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        # First arrival is stored by reference and never mutated afterwards
        # (accumulation always rebinds), so callers may pass shared arrays.
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse sweep from this tensor; accumulates into ``.grad`` fields."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("backward() from a non-finite tensor")
        order = _toposort(self)
        self._accumulate(_as_array(grad).reshape(self.data.shape))
        for node in order:
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                if node is not self:
                    node.grad = None  # interior node; only leaves keep gradients

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        o = _coerce(other)
        out = _node(self.data + o.data, (self, o))

        def back(g):
            _send(self, _unbroadcast(g, self.shape))
            _send(o, _unbroadcast(g, o.shape))

        return _finish(out, back)

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        return _finish(out, lambda g: _send(self, -g))

    def __sub__(self, other):
        o = _coerce(other)
        out = _node(self.data - o.data, (self, o))

        def back(g):
            _send(self, _unbroadcast(g, self.shape))
            _send(o, _unbroadcast(-g, o.shape))

        return _finish(out, back)

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __mul__(self, other):
        o = _coerce(other)
        out = _node(self.data * o.data, (self, o))

        def back(g):
            _send(self, _unbroadcast(g * o.data, self.shape))
            _send(o, _unbroadcast(g * self.data, o.shape))

        return _finish(out, back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _coerce(other)
        out = _node(self.data / o.data, (self, o))

        def back(g):
            _send(self, _unbroadcast(g / o.data, self.shape))
            _send(o, _unbroadcast(-g * self.data / (o.data * o.data), o.shape))

        return _finish(out, back)

    def __pow__(self, p):
        p = float(p)  # exponent is a constant, never a graph node
        out = _node(self.data**p, (self,))
        if p == 0.0:
            return _finish(out, lambda g: _send(self, np.zeros_like(self.data)))
        if p == 1.0:
            return _finish(out, lambda g: _send(self, g))
        return _finish(out, lambda g: _send(self, g * p * self.data ** (p - 1.0)))

    def __matmul__(self, other):
        o = _coerce(other)
        a, b = self.data, o.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul requires tensors with ndim >= 2")
        if a.ndim != b.ndim and not (a.ndim == 2 and b.ndim == 2):
            raise ValueError("matmul supports 2-D or equal-rank batched operands")
        if a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ValueError("batched matmul requires identical leading dims")
        out = _node(a @ b, (self, o))

        def back(g):
            _send(self, g @ np.swapaxes(b, -1, -2))
            _send(o, np.swapaxes(a, -1, -2) @ g)

        return _finish(out, back)

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = _node(y, (self,))
        return _finish(out, lambda g: _send(self, g * y))

    def log(self):
        out = _node(np.log(self.data), (self,))
        return _finish(out, lambda g: _send(self, g / self.data))

    def sqrt(self):
        y = np.sqrt(self.data)
        out = _node(y, (self,))
        return _finish(out, lambda g: _send(self, g * 0.5 / y))

    def tanh(self):
        y = np.tanh(self.data)
        out = _node(y, (self,))
        return _finish(out, lambda g: _send(self, g * (1.0 - y * y)))

    def abs(self):
        # subgradient convention: d|x|/dx = 0 at x == 0
        out = _node(np.abs(self.data), (self,))
        return _finish(out, lambda g: _send(self, g * np.sign(self.data)))

    def relu(self):
        out = _node(np.maximum(self.data, 0.0), (self,))
        return _finish(out, lambda g: _send(self, g * (self.data > 0.0)))

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
        out = _node(x * cdf, (self,))
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return _finish(out, lambda g: _send(self, g * (cdf + x * pdf)))

    def sigmoid(self):
        y = _stable_sigmoid(self.data)
        out = _node(y, (self,))
        return _finish(out, lambda g: _send(self, g * y * (1.0 - y)))

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        shape = self.shape

        def back(g):
            _send(self, np.broadcast_to(_restore_axes(g, shape, axis, keepdims), shape).copy())

        return _finish(out, back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in _axis_tuple(axis, self.ndim)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape manipulation -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))
        orig = self.shape
        return _finish(out, lambda g: _send(self, g.reshape(orig)))

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = _node(self.data.transpose(axes), (self,))
        return _finish(out, lambda g: _send(self, g.transpose(inv)))

    def __getitem__(self, key):
        out = _node(self.data[key], (self,))
        advanced = _is_advanced(key)
        # Direct scatter is valid (and much faster than np.add.at) whenever no
        # destination element is selected twice.
        direct = not advanced or _key_selects_uniquely(key)

        def back(g):
            if not self.requires_grad:
                return
            buf = np.zeros_like(self.data)
            if direct:
                buf[key] = g
            else:
                np.add.at(buf, key, g)
            _send(self, buf)

        return _finish(out, back)

    # -- fused numeric kernels ------------------------------------------------------

    def softmax(self, axis: int = -1):
        """Row-stabilized softmax; rows sum to one to within 1e-12."""
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        out = _node(y, (self,))

        def back(g):
            _send(self, y * (g - (g * y).sum(axis=axis, keepdims=True)))

        return _finish(out, back)

    def log_softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = _node(y, (self,))

        def back(g):
            _send(self, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

        return _finish(out, back)

    def normalize_rows(self, eps: float = 1e-12):
        """Zero-mean unit-variance normalization along the last axis (no affine)."""
        mu = self.data.mean(axis=-1, keepdims=True)
        xc = self.data - mu
        inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv_std
        out = _node(xhat, (self,))

        def back(g):
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * xhat).mean(axis=-1, keepdims=True)
            _send(self, inv_std * (g - gm - xhat * gx))

        return _finish(out, back)


# -- free functions ------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            _send(t, g[tuple(idx)])

    return _finish(out, back)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for 2-D x; the workhorse behind every linear layer."""
    if x.ndim != 2:
        raise ValueError("affine expects a 2-D input")
    out = _node(x.data @ w.data + b.data, (x, w, b))

    def back(g):
        _send(x, g @ w.data.T)
        _send(w, x.data.T @ g)
        _send(b, g.sum(axis=0))

    return _finish(out, back)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |x|."""
    x = logits.data
    z = _as_array(targets)
    val = np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))
    out = _node(val, (logits,))
    return _finish(out, lambda g: _send(logits, g * (_stable_sigmoid(x) - z)))


# -- graph plumbing ---------------------------------------------------------------


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    t = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
    return t


def _finish(t: Tensor, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if t.requires_grad:
        t._backward_fn = backward_fn
    return t


def _send(parent: Tensor, g: np.ndarray) -> None:
    if parent.requires_grad:
        parent._accumulate(g)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None or keepdims:
        return g.reshape([1] * len(shape)) if axis is None and not keepdims else g
    for a in sorted(_axis_tuple(axis, len(shape))):
        g = np.expand_dims(g, a)
    return g


def _is_advanced(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def _key_selects_uniquely(key) -> bool:
    """True when an advanced-index key provably selects no element twice."""
    parts = key if isinstance(key, tuple) else (key,)
    arrays = [np.asarray(p) for p in parts if isinstance(p, (np.ndarray, list))]
    if all(a.dtype == bool for a in arrays):
        return True
    if any(a.dtype == bool for a in arrays):
        return False
    int_arrays = [a for a in arrays if a.dtype.kind in "iu"]
    if len(int_arrays) != len(arrays) or not int_arrays:
        return False
    if len(int_arrays) > 1 and any(a.shape != int_arrays[0].shape for a in int_arrays):
        return False
    # Distinct values in any one coordinate array make every selection distinct.
    return any(np.unique(a.ravel()).size == a.size for a in int_arrays)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- finite-difference gradient audit ----------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of a central finite-difference audit of reverse-mode gradients."""

    max_rel_err: float
    worst_param: str
    worst_index: int
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def gradient_check(
    params: Mapping[str, Tensor],
    loss_fn: Callable[[], Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    `loss_fn` must rebuild its graph on every call and read the live buffers in
    `params`. When the total element count exceeds `max_elements` a deterministic
    seeded subsample (never fewer than 100 elements) is checked instead.
    Raises NumericError if the loss is non-finite.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError("gradient_check needs a scalar loss")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is non-finite at the linearization point")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    entries = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    if max_elements is not None and len(entries) > max_elements:
        take = max(100, max_elements)
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(entries), size=min(take, len(entries)), replace=False)
        entries = [entries[int(i)] for i in sorted(idx)]

    worst = (0.0, "", -1)
    for name, i in entries:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            hi = float(loss_fn().data)
            flat[i] = orig - h
            lo = float(loss_fn().data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
        numeric = (hi - lo) / (2.0 * h)
        a = analytic[name].reshape(-1)[i]
        # 1e-6 floor keeps FD roundoff noise from dominating near-zero gradients
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        if rel > worst[0]:
            worst = (rel, name, i)
    return GradCheckReport(
        max_rel_err=worst[0],
        worst_param=worst[1],
        worst_index=worst[2],
        n_checked=len(entries),
        tol=tol,
    )

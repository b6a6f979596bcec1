"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive builds a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  Node ids increase
monotonically, so sorting the nodes reachable from a loss by id yields a
valid topological order (the :class:`Tape`).  A graph is consumed by its
backward pass; a second ``backward()`` on the same loss raises.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a forward or backward computation."""


class BackwardError(RuntimeError):
    """backward() called without a live recorded forward pass."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_ids)
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- graph ---------------------------------------------------------
    def backward(self) -> "Tape":
        """Populate ``.grad`` on every tensor that contributed to this scalar."""
        if self._consumed:
            raise BackwardError("graph already consumed by backward(); run a new forward pass")
        if self._backward is None:
            raise BackwardError("backward() requires a tensor produced by a recorded forward pass")
        if self.data.size != 1:
            raise BackwardError(f"backward() needs a scalar, got shape {self.shape}")
        tape = tape_of(self)
        for node in tape.nodes:
            if node._backward is not None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape.nodes):
            if node._backward is not None:
                node._backward(node.grad)
        for node in tape.nodes:
            if node.grad is not None:
                _check(node.grad, f"backward of {node._op}")
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True
        return tape

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


@dataclass
class Tape:
    """Recorded primitives reachable from a loss, inputs before outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    @property
    def ops(self) -> list[str]:
        return [n._op for n in self.nodes]

    def is_topological(self) -> bool:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return all(pos[id(p)] < pos[id(n)] for n in self.nodes for p in n._parents)


def tape_of(root: Tensor) -> Tape:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return Tape(sorted(seen.values(), key=lambda n: n._id))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(_check(data, op))
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += _unbroadcast(g, t.data.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    def backward(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(a.data**p, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        return _make(np.log(a.data), (a,), backward, "log")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def backward(g):
        _accum(a, g * pos)

    return _make(np.where(pos, a.data, 0.0), (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))

    return _make(0.5 * x * (1.0 + t), (a,), backward, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accum(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clip")


# -- shape ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.multiply.outer(g, b.data)
            _accum(a, ga)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.multiply.outer(a.data, g)
            _accum(b, gb)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col. x: (B, C, H, W), w: (O, C, kh, kw)."""
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]  # B, C, Ho, Wo, kh, kw
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if w.requires_grad:
            w.grad += (gm.T @ cols).reshape(w.data.shape)
        if b is not None and b.requires_grad:
            b.grad += gm.sum(axis=0)
        if x.requires_grad:
            dcols = np.ascontiguousarray((gm @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2))
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, :, i, j]
            x.grad += gxp[:, :, p : p + H, p : p + W] if p else gxp

    return _make(out, parents, backward, "conv2d")


# -- normalisation / probabilities ---------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))

    return _make(out_data, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    probs = np.exp(out_data)

    def backward(g):
        _accum(a, g - probs * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        _accum(gamma, g * xhat)
        _accum(beta, g)
        if x.requires_grad:
            gx = g * gamma.data
            n = x.data.shape[-1]
            x.grad += inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")

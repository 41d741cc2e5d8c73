"""A small reverse-mode gradient tape over numpy arrays.

Operations executed while a :class:`Tape` is active append a node holding the
inputs and a vector-Jacobian product.  Nodes are appended in execution order,
so walking the list backwards is a valid reverse topological order.

Complex quantities never enter the tape: they travel as pairs of real tensors
(real plane, imaginary plane).  The diagonal recurrence is a single primitive,
:func:`linear_scan`, whose adjoint is another scan running the other way.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .scan import DEFAULT_BLOCK_SIZE, par_scan, reverse_scan

_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array that may carry a name (parameters) and take part in the tape."""

    __slots__ = ("data", "name", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, name: Optional[str] = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Append-only record of taped operations plus accumulated parameter gradients."""

    nodes: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def clear(self):
        self.nodes.clear()
        self.gradients.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, out_data, inputs, vjp) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(Node(op, out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(parameter) into ``tape.gradients`` (keyed by name) and return it."""
    if not isinstance(loss, Tensor) or not any(node.out is loss for node in tape.nodes):
        raise ContractError("loss was not produced by an operation recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.name is not None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {leaf.name!r}")
        prev = tape.gradients.get(leaf.name)
        tape.gradients[leaf.name] = g if prev is None else prev + g
    return tape.gradients


# -- elementwise -----------------------------------------------------------------


def add(x, y):
    x, y = as_tensor(x), as_tensor(y)
    return _record("add", x.data + y.data, (x, y),
                   lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(x, y):
    x, y = as_tensor(x), as_tensor(y)
    return _record("sub", x.data - y.data, (x, y),
                   lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(x, y):
    x, y = as_tensor(x), as_tensor(y)
    return _record("mul", x.data * y.data, (x, y),
                   lambda g: (_unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)))


def div(x, y):
    x, y = as_tensor(x), as_tensor(y)
    out = x.data / y.data
    return _record("div", out, (x, y),
                   lambda g: (_unbroadcast(g / y.data, x.shape), _unbroadcast(-g * out / y.data, y.shape)))


def power(x, p: float):
    x = as_tensor(x)
    return _record("pow", x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sin(x):
    x = as_tensor(x)
    return _record("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    x = as_tensor(x)
    return _record("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def absolute(x):
    x = as_tensor(x)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def dropout(x, rate: float, rng: np.random.Generator):
    """Inverted dropout; the mask is a constant of the tape."""
    x = as_tensor(x)
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, mask)


# -- reductions and shape --------------------------------------------------------


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size / max(out.size, 1) if axis is not None else x.data.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record("mean", out, (x,), vjp)


def reshape(x, shape):
    x = as_tensor(x)
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x):
    x = as_tensor(x)
    return _record("transpose", x.data.T, (x,), lambda g: (g.T,))


def getitem(x, index):
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return _record("getitem", x.data[index], (x,), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return _record("stack", out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


# -- linear algebra --------------------------------------------------------------


def matmul(x, w):
    """``x @ w`` for ``x`` of shape (..., k) and a matrix ``w`` of shape (k, j)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"matmul shapes {x.shape} and {w.shape} are incompatible")
    # flat, contiguous operands keep numpy on the BLAS path
    x2 = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    w2 = np.ascontiguousarray(w.data)
    out = (x2 @ w2).reshape(x.shape[:-1] + (w.shape[1],))

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
        gx = (g2 @ w2.T).reshape(x.shape)
        gw = x2.T @ g2
        return gx, gw

    return _record("matmul", out, (x, w), vjp)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), vjp)


def pick(x, labels):
    """Select ``x[..., labels]`` along the last axis (one entry per leading index)."""
    x = as_tensor(x)
    labels = np.asarray(labels)
    if labels.shape != x.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match scores {x.shape}")
    idx = labels[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _record("pick", out, (x,), vjp)


# -- recurrence ------------------------------------------------------------------


def linear_scan(lam_re, lam_im, b_re, b_im, reverse: bool = False, block_size: int = DEFAULT_BLOCK_SIZE):
    """Run ``h_k = lam * h_{k-1} + b_k`` (or its time-reversed form) on real planes.

    Returns a tensor of shape ``(2, ..., N, n)`` stacking the real and imaginary
    parts of the hidden states.
    """
    lam_re, lam_im, b_re, b_im = (as_tensor(t) for t in (lam_re, lam_im, b_re, b_im))
    lam = lam_re.data + 1j * lam_im.data
    b = b_re.data + 1j * b_im.data
    run, adjoint = (reverse_scan, par_scan) if reverse else (par_scan, reverse_scan)
    h = run(lam, b, block_size=block_size).values

    def vjp(g):
        delta = adjoint(np.conj(lam), g[0] + 1j * g[1], block_size=block_size).values
        prev = np.zeros_like(h)
        if reverse:
            prev[..., :-1, :] = h[..., 1:, :]
        else:
            prev[..., 1:, :] = h[..., :-1, :]
        g_lam = np.sum(delta * np.conj(prev), axis=tuple(range(delta.ndim - 1)))
        g_lam = _unbroadcast(g_lam, lam.shape) if lam.ndim else g_lam
        return g_lam.real, g_lam.imag, delta.real, delta.imag

    return _record("linear_scan", np.stack([h.real, h.imag]), (lam_re, lam_im, b_re, b_im), vjp)

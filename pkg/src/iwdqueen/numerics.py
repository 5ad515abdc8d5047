"""Small reverse-mode autodiff engine over float64 numpy arrays, plus Adam.

Every op returns a new :class:`Tensor`; when gradients are enabled and any
input requires them, the result remembers its parents and a closure mapping
the upstream gradient to one gradient per parent.  ``Tensor.backward`` walks
the graph in reverse topological order.

Broadcasting follows numpy; gradients are summed back to each operand's
shape.  Any op producing NaN/Inf raises :class:`NumericalError`.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import NumericalError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward (loss must be scalar)", self.shape)
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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
        return mul(self, 1.0 / _as_array(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data, parents: Sequence[Tensor], backward) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_op(op: str, data, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap a hand-written forward/backward pair as a graph node.

    *backward* maps the upstream gradient to one gradient per parent.
    """
    return _result(op, data, parents, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return _result("log", data, (x,), lambda g: (g / x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data**2)
    return _result("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def dropout(x, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; exact identity when ``rate == 0`` or not training."""
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return _result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# --- shape ops -------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _result("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    inv = np.argsort(axes)
    return _result("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x, idx) -> Tensor:
    x = as_tensor(x)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result("index", x.data[idx], (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result("concat", data, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def pad(x, widths) -> Tensor:
    """Zero padding; *widths* as for :func:`numpy.pad`."""
    x = as_tensor(x)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _result("pad", np.pad(x.data, widths), (x,), lambda g: (g[sl],))


# --- reductions ------------------------------------------------------------

def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", x.data.sum(axis=axis), (x,), back)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis) * (1.0 / n)


# --- linear algebra and normalisation -------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", data, (a, b), back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result("softmax", s, (x,), back)


LN_EPS = 1e-5


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then scale by *gamma* and shift by *beta*."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), back)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# --- complex state containers ---------------------------------------------

@dataclass
class ComplexTensor:
    """Complex array stored as separate real and imaginary float64 parts."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.shape != self.im.shape:
            raise ShapeError("ComplexTensor", self.re.shape, self.im.shape)
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise NumericalError("ComplexTensor has non-finite entries")

    @classmethod
    def from_complex(cls, z) -> "ComplexTensor":
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @property
    def shape(self) -> tuple:
        return self.re.shape

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.re**2 + self.im**2)))


def apply_gate(state, matrix, qubits: Sequence[int], n_qubits: int):
    """Apply a ``2^k x 2^k`` gate to *qubits* of an n-qubit state vector.

    Qubit 0 is the most significant bit of the basis index.  Accepts either a
    complex ndarray of length ``2**n_qubits`` or a :class:`ComplexTensor` and
    returns the same kind.
    """
    wrap = isinstance(state, ComplexTensor)
    psi = state.to_complex() if wrap else np.asarray(state, dtype=np.complex128)
    k = len(qubits)
    m = np.asarray(matrix, dtype=np.complex128)
    if psi.shape != (2**n_qubits,) or m.shape != (2**k, 2**k):
        raise ShapeError("apply_gate", psi.shape, m.shape)
    if len(set(qubits)) != k or any(not 0 <= q < n_qubits for q in qubits):
        raise ValueError(f"invalid qubit selection {tuple(qubits)} for {n_qubits} qubits")
    t = psi.reshape([2] * n_qubits)
    t = np.tensordot(m.reshape([2] * (2 * k)), t, axes=(list(range(k, 2 * k)), list(qubits)))
    t = np.moveaxis(t, list(range(k)), list(qubits)).reshape(-1)
    return ComplexTensor.from_complex(t) if wrap else t


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update over named parameter arrays.

    Returns fresh parameter arrays; *state* is advanced in place and returned.
    Parameters without an entry in *grads* are treated as having zero gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericalError(f"non-finite gradient in parameter group {name!r} ({bad} entries)")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step[{name}]", p.shape, g.shape)
        m = state.beta1 * state.m.get(name, 0.0) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state

"""Reverse-mode differentiation over dense float64 numpy arrays.

Every op records its parents and a backward rule mapping the output gradient
to one gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order. Intermediate gradients live only for the duration of one
backward call; leaf gradients accumulate into ``Tensor.grad`` until
``zero_grad`` is called, so two backward passes without a reset give exactly
twice the gradient.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericalError(ArithmeticError):
    """A function produced a non-finite value."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_nonscalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------- shape ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def rule(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), rule, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return _make(np.array(out), (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def gather_rows(a, index) -> Tensor:
    """``a[index]`` for an integer index array of any shape; backward scatter-adds."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")
    src = a.shape

    def rule(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, index.reshape(-1), g.reshape((-1,) + src[1:]))
        return (out,)

    return _make(a.data[index], (a,), rule, "gather")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def rule(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), rule, "getitem")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / count)


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element."""
    a = as_tensor(a)
    ad = a.data
    if axis is None:
        flat = int(np.argmax(ad))

        def rule_all(g):
            out = np.zeros(ad.size, dtype=DTYPE)
            out[flat] = float(np.asarray(g).reshape(-1)[0])
            return (out.reshape(ad.shape),)

        val = ad.reshape(-1)[flat]
        data = np.full((1,) * ad.ndim, val) if keepdims else np.asarray(val)
        return _make(data, (a,), rule_all, "max")
    if not isinstance(axis, int):
        raise ValueError("max_: only a single axis or None supported")
    ax = axis % ad.ndim
    idx = np.expand_dims(np.argmax(ad, axis=ax), ax)
    out = np.take_along_axis(ad, idx, axis=ax)

    def rule(g):
        grad = np.zeros(ad.shape, dtype=DTYPE)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(grad, idx, gk, axis=ax)
        return (grad,)

    return _make(out if keepdims else np.squeeze(out, ax), (a,), rule, "max")


# ---------------------------------------------------------------- composites with fused backward

def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), rule, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def rule(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), rule, "log_softmax")


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _make(xhat, (a,), rule, "layer_norm")
    if n == 0:
        raise ShapeError("layer_norm: empty last axis")
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def attention(q, k, v, scale: float | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention built from primitives.

    Returns ``(output, weights)``; leading batch axes broadcast through matmul.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    logits = matmul(q, transpose(k)) * scale
    weights = softmax(logits)
    return matmul(weights, v), weights


OP_SET = (
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "clip", "abs",
    "matmul", "transpose", "reshape", "broadcast", "concat", "gather", "getitem",
    "sum", "mean", "max", "relu", "gelu", "sigmoid", "tanh", "softmax",
    "log_softmax", "layer_norm", "attention",
)


def op_set() -> tuple[str, ...]:
    return OP_SET


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every requires-grad leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=DTYPE)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    """Reset gradients to exact zeros; leaves the root does not reach stay zero."""
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_error: float
    worst_name: str
    worst_index: tuple[int, ...]
    checked: int
    tol: float
    details: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} worst_rel_err={self.worst_rel_error:.3e} at {self.worst_name}"
                f"{list(self.worst_index)} ({self.checked} elements, tol={self.tol:g})")


def _eval_scalar(fn, tensors) -> float:
    with no_grad():
        out = fn(tensors)
    val = np.asarray(out.data if isinstance(out, Tensor) else out, dtype=DTYPE)
    if val.size != 1:
        raise ValueError(f"grad_check: function must return a scalar, got shape {val.shape}")
    return float(val.reshape(-1)[0])


def grad_check(fn: Callable, point, h: float = 1e-5, tol: float = 1e-4,
               max_elements: int | None = None, rng: np.random.Generator | None = None,
               ) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``point`` is an array or a ``{name: array}`` mapping; ``fn`` is called with
    a Tensor (or a dict of Tensors) and must return a scalar Tensor. When
    ``max_elements`` is set, each input is checked on at most that many
    randomly chosen elements.
    """
    single = not isinstance(point, dict)
    arrays = {"x": np.array(point, dtype=DTYPE)} if single else {
        k: np.array(v, dtype=DTYPE) for k, v in point.items()}

    def call(ts):
        return fn(ts["x"] if single else ts)

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    out = call(leaves)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("grad_check: non-finite function value at the base point")
    backward(out)

    rng = rng or np.random.default_rng(0)
    worst = (0.0, "", ())
    details: dict[str, float] = {}
    checked = 0
    for name, base in arrays.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        flat_idx = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            flat_idx = np.sort(rng.choice(base.size, size=max_elements, replace=False))
        name_worst = 0.0
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), base.shape) if base.ndim else ()
            vals = []
            for sign in (1.0, -1.0):
                pert = {k: Tensor(v) for k, v in arrays.items()}
                pert[name].data = base.copy()
                pert[name].data[idx] += sign * h
                f = _eval_scalar(call, pert)
                if not math.isfinite(f):
                    raise NumericalError(f"grad_check: non-finite value perturbing {name}{[int(i) for i in idx]}")
                vals.append(f)
            numeric = (vals[0] - vals[1]) / (2.0 * h)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            name_worst = max(name_worst, rel)
            if rel > worst[0] or not worst[1]:
                worst = (rel, name, tuple(int(i) for i in idx))
        details[name] = name_worst
    return GradCheckReport(worst[0] <= tol, worst[0], worst[1], worst[2], checked, tol, details)

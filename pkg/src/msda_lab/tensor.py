"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records itself on a dynamic tape (parent links plus a backward
closure) when any input requires a gradient. ``Tensor.backward`` walks the
tape once in reverse topological order and accumulates into leaf ``.grad``.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, PreconditionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = "leaf"
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    # -- reverse pass ----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if self.data.size != 1:
            raise PreconditionError(f"backward: loss must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = graph(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
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
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def graph(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root`` in topological order (parents first)."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise PreconditionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b),
                           lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._from_op(out, (a, b),
                           lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


# -- elementwise unary -------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input contains non-positive values")
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: input contains negative values")
    out = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return Tensor._from_op(out, (a,), back, "sqrt")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor._from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


# -- reductions --------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,),
                           lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise PreconditionError("mean: empty tensor")
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // out.size
    return Tensor._from_op(out, (a,),
                           lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,), "mean")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor._from_op(out, (a,), back, "logsumexp")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._from_op(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._from_op(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


# -- shape / linear algebra --------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise PreconditionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise PreconditionError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise PreconditionError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise PreconditionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._from_op(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def take(a, index) -> Tensor:
    """Numpy-style indexing (slices, integer arrays, ``np.ix_`` tuples); backward scatter-adds."""
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise PreconditionError(f"take: {exc} for shape {shape}") from None

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (a,), back, "take")


def row_norm(a) -> Tensor:
    """Euclidean norm of every row of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise PreconditionError(f"row_norm: expected 2-D tensor, got shape {a.shape}")
    out = np.sqrt((a.data ** 2).sum(axis=1))
    ad = a.data

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(out > 0, g / out, 0.0)
        return (ad * r[:, None],)

    return Tensor._from_op(out, (a,), back, "row_norm")


def sqdist(x, y, gram: bool = False) -> Tensor:
    """Matrix of squared Euclidean distances between the rows of ``x`` and ``y``.

    The default forms explicit differences, so identical rows give exactly 0.
    ``gram=True`` uses |x|^2 + |y|^2 - 2 x.y (clamped at 0): much faster on
    large blocks, exact only up to rounding.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise PreconditionError(f"sqdist: incompatible shapes {x.shape} and {y.shape}")
    xd, yd = x.data, y.data
    if gram:
        out = np.maximum((xd * xd).sum(1)[:, None] + (yd * yd).sum(1)[None, :] - 2.0 * xd @ yd.T, 0.0)
        if x is y:
            out = 0.5 * (out + out.T)
            np.fill_diagonal(out, 0.0)
    else:
        diff = xd[:, None, :] - yd[None, :, :]
        out = (diff * diff).sum(axis=-1)

    def back(g):
        gx = 2.0 * (g.sum(axis=1)[:, None] * xd - g @ yd)
        gy = 2.0 * (g.sum(axis=0)[:, None] * yd - g.T @ xd)
        return gx, gy

    return Tensor._from_op(out, (x, y), back, "sqdist")


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# -- optimisation ------------------------------------------------------------

@dataclass
class SgdState:
    """SGD with momentum, L2 weight decay and a per-epoch cosine schedule down to ``eta_min``."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta_min: float = 2e-5
    total_epochs: int = 1
    epoch: int = 0
    velocity: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise PreconditionError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise PreconditionError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.learning_rate <= 0:
            raise PreconditionError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.eta_min > self.learning_rate:
            raise PreconditionError(f"eta_min ({self.eta_min}) exceeds learning_rate ({self.learning_rate})")

    @property
    def lr(self) -> float:
        if self.total_epochs <= 1:
            return self.learning_rate
        t = min(self.epoch, self.total_epochs - 1) / (self.total_epochs - 1)
        return self.eta_min + 0.5 * (self.learning_rate - self.eta_min) * (1.0 + math.cos(math.pi * t))

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch


def sgd_step(params: Iterable[Tensor], state: SgdState) -> None:
    """``v <- momentum*v + grad + wd*param``; ``param <- param - lr*v``; grads cleared."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise PreconditionError("sgd_step: parameter has no gradient")
    lr = state.lr
    for p in params:
        g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        if state.momentum:
            v = state.velocity.get(id(p))
            v = g if v is None else state.momentum * v + g
            state.velocity[id(p)] = v
        else:
            v = g
        p.data = p.data - lr * v
        p.grad = None


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between the autodiff gradient of ``f`` at ``x`` and central differences."""
    if not 0 < eps <= 1e-3:
        raise PreconditionError(f"finite_diff_check: eps must be in (0, 1e-3], got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise DomainError("finite_diff_check: f(x) is not finite")
    y.backward()
    auto = np.zeros_like(x0) if xt.grad is None else xt.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x0)).item()
            flat[i] = orig - eps
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return float(np.max(np.abs(auto - numeric) / (np.abs(numeric) + 1e-8)))

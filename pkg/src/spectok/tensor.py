"""Dense float64 tensors with a reverse-mode tape.

Every op records its parents and a closure mapping the output gradient to
per-parent gradients. Broadcasting follows numpy; gradients are summed back
down to each parent's shape. The tape is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "count_matmuls",
    "matmul",
    "softmax_rows",
    "log_softmax_rows",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "reduce",
    "concat",
    "broadcast_to",
    "backward",
    "grad_check",
    "grad_check_params",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


_GRAD_ENABLED = True
_FLOP_LOG: list[int] | None = None


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def count_matmuls():
    """Collect the multiply-add count of every matmul executed in the block.

    Yields a list that receives one integer per matmul call.
    """
    global _FLOP_LOG
    prev = _FLOP_LOG
    log_: list[int] = []
    _FLOP_LOG = log_
    try:
        yield log_
    finally:
        _FLOP_LOG = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError(f"empty tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return reduce("mean", self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    # callers guard zero denominators
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    out = a.data @ b.data
    if _FLOP_LOG is not None:
        m, k = a.shape[-2:]
        n = b.shape[-1]
        _FLOP_LOG.append(int(np.prod(batch, dtype=np.int64)) * m * k * n)

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), _bw, "matmul")


# ----------------------------------------------------------------- unary ops


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "gelu": gelu, "scale": scale}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise op by name: add, sub, mul, div, gelu, scale."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def _expand(g: np.ndarray, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """Reduce with ``op`` in {mean, var, sum, max}; var is the population variance."""
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    count = a.size if axes is None else int(np.prod([shape[ax] for ax in axes]))

    if op == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        bw = lambda g: (_expand(g, shape, axes, keepdims).copy(),)
    elif op == "mean":
        out = a.data.mean(axis=axes, keepdims=keepdims)
        bw = lambda g: (_expand(g, shape, axes, keepdims) / count,)
    elif op == "var":
        mu = a.data.mean(axis=axes, keepdims=True)
        centered = a.data - mu
        out = (centered**2).mean(axis=axes, keepdims=keepdims)
        bw = lambda g: (_expand(g, shape, axes, keepdims) * centered * (2.0 / count),)
    elif op == "max":
        out = a.data.max(axis=axes, keepdims=keepdims)
        full = a.data.max(axis=axes, keepdims=True)
        mask = (a.data == full).astype(np.float64)
        # ties share the gradient evenly
        mask /= mask.sum(axis=axes, keepdims=True)
        bw = lambda g: (_expand(g, shape, axes, keepdims) * mask,)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(np.asarray(out, dtype=np.float64), (a,), bw, op)


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), _bw, "softmax")


def log_softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def _bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), _bw, "log_softmax")


# -------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a, idx) -> Tensor:
    a = _as_tensor(a)
    out = np.array(a.data[idx], dtype=np.float64)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in parts)

    def _bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), _bw, "index")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]}: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------- grad check


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    known_zero: dict[int, np.ndarray] | None = None,
    zero_tol: float = 1e-9,
) -> float:
    """Max relative error between autodiff and central differences over ``params``.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar tensor. The per-coordinate error is
    ``|fd - ad| / (|fd| + |ad| + 1e-12)``.

    ``known_zero`` maps a parameter's position in ``params`` to a boolean
    mask of coordinates whose exact gradient is zero by construction. The
    ratio above is meaningless there (both sides are roundoff), so those
    coordinates instead count as error 0 if ``|fd|`` and ``|ad|`` are both
    below ``zero_tol`` and as error 1 otherwise.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    known_zero = known_zero or {}
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    with no_grad():
        for k, p in enumerate(params):
            ad = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            ad_flat = ad.reshape(-1)
            zero_mask = known_zero.get(k)
            zero_flat = None if zero_mask is None else np.asarray(zero_mask, bool).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = loss_fn().item()
                flat[i] = orig - eps
                lo = loss_fn().item()
                flat[i] = orig
                fd = (hi - lo) / (2.0 * eps)
                if zero_flat is not None and zero_flat[i]:
                    err = 0.0 if max(abs(fd), abs(ad_flat[i])) < zero_tol else 1.0
                else:
                    err = abs(fd - ad_flat[i]) / (abs(fd) + abs(ad_flat[i]) + 1e-12)
                worst = max(worst, err)
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Central-difference check of ``f`` at ``x``; see :func:`grad_check_params`."""
    x.requires_grad = True
    return grad_check_params(lambda: f(x), [x], eps)

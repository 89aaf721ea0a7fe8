"""Dense tensors with reverse-mode automatic differentiation.

Every op produces a new :class:`Tensor` that remembers its operands and a
context for its backward rule. Backward rules live in ``BACKWARD_RULES``
keyed by op name, so tests can swap one out to check that gradient
verification notices.

Arrays are numpy float64 unless the caller hands in float32 data.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParameterError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=dtype or np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "op", "ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.op: str | None = None
        self.ctx = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars take the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    return _lift(a, b if isinstance(b, Tensor) else None), _lift(b)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, ctx=None) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.op = op
        out.ctx = ctx
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- backward rules ------------------------------------------------------
# Each rule maps (upstream grad, node) to one gradient per parent.

def _add_rule(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_rule(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_rule(g, node):
    a, b = node.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _matmul_rule(g, node):
    a, b = node.parents
    return g @ b.data.T, a.data.T @ g


def _tanh_rule(g, node):
    y = node.ctx
    return (g * (1.0 - y * y),)


def _sigmoid_rule(g, node):
    y = node.ctx
    return (g * y * (1.0 - y),)


def _relu_rule(g, node):
    (x,) = node.parents
    return (g * (x.data > 0),)


def _exp_rule(g, node):
    return (g * node.ctx,)


def _log_rule(g, node):
    (x,) = node.parents
    return (g / x.data,)


def _softmax_rule(g, node):
    y, axis = node.ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax_rule(g, node):
    y, axis = node.ctx
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


def _dropout_rule(g, node):
    return (g * node.ctx,)


def _concat_rule(g, node):
    axis, bounds = node.ctx
    return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in bounds)


def _stack_rule(g, node):
    axis = node.ctx
    return tuple(np.take(g, i, axis=axis) for i in range(len(node.parents)))


def _sum_rule(g, node):
    (x,) = node.parents
    axis, keepdims = node.ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _reshape_rule(g, node):
    (x,) = node.parents
    return (g.reshape(x.shape),)


def _transpose_rule(g, node):
    return (g.T,)


def _index_rule(g, node):
    (x,) = node.parents
    out = np.zeros_like(x.data)
    np.add.at(out, node.ctx, g)
    return (out,)


def _take_along_rule(g, node):
    (x,) = node.parents
    idx, axis = node.ctx
    out = np.zeros_like(x.data)
    np.put_along_axis(out, idx, g, axis=axis)
    return (out,)


def _where_rule(g, node):
    a, b = node.parents
    cond = node.ctx
    return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _add_rule,
    "sub": _sub_rule,
    "mul": _mul_rule,
    "matmul": _matmul_rule,
    "tanh": _tanh_rule,
    "sigmoid": _sigmoid_rule,
    "relu": _relu_rule,
    "exp": _exp_rule,
    "log": _log_rule,
    "softmax": _softmax_rule,
    "log_softmax": _log_softmax_rule,
    "dropout": _dropout_rule,
    "concat": _concat_rule,
    "stack": _stack_rule,
    "sum": _sum_rule,
    "reshape": _reshape_rule,
    "transpose": _transpose_rule,
    "index": _index_rule,
    "take_along": _take_along_rule,
    "where": _where_rule,
}


# -- forward ops ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``[m x k] @ [k x n]``."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _node(a.data @ b.data, (a, b), "matmul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), "tanh", y)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), "sigmoid", y)


def relu(x: Tensor) -> Tensor:
    return _node(np.maximum(x.data, 0.0), (x,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), "exp", y)


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), "log")


_ELEMENTWISE = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid, "sub": sub, "relu": relu}


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch a pointwise op by name (``add``, ``mul``, ``tanh``, ``sigmoid``...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def _check_reduce_axis(x: Tensor, axis: int, op: str) -> None:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"{op}: empty input of shape {x.shape}")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    _check_reduce_axis(x, axis, "softmax")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), "softmax", (y, axis))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_reduce_axis(x, axis, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _node(y, (x,), "log_softmax", (y, axis))


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so eval mode is identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs a generator")
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    scale = scale.astype(x.dtype)
    return _node(x.data * scale, (x,), "dropout", scale)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no operands")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: off-axis shapes disagree {shapes} (axis={axis})") from None
    bounds, lo = [], 0
    for t in tensors:
        hi = lo + t.shape[axis]
        bounds.append((lo, hi))
        lo = hi
    return _node(data, tensors, "concat", (axis, bounds))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: shapes disagree {[t.shape for t in tensors]}") from None
    return _node(data, tensors, "stack", axis)


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum", (axis, keepdims))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _node(data, (x,), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T, (x,), "transpose")


def index_select(x: Tensor, index) -> Tensor:
    """``x[index]`` for slices or integer arrays; repeated rows accumulate gradient."""
    try:
        data = x.data[index]
    except IndexError as exc:
        raise ParameterError(f"index out of range for shape {x.shape}: {exc}") from None
    return _node(np.array(data), (x,), "index", index)


def take_along(x: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    idx = np.asarray(idx)
    return _node(np.take_along_axis(x.data, idx, axis=axis), (x,), "take_along", (idx, axis))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    return _node(np.where(cond, a.data, b.data), (a, b), "where", cond)


# -- backward ------------------------------------------------------------

@dataclass
class ComputationRecord:
    """Recorded ops reachable from a root, operands before users."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
        return cls(order)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf with ``requires_grad`` reachable from ``root``."""
    if root.data.size != 1 or root.ndim != 0:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not depend on any parameter")
    record = ComputationRecord.trace(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, BACKWARD_RULES[node.op](g, node)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient verification ----------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` must rebuild its graph from the current parameter data on every call
    and be deterministic (reseed any dropout generator inside it). At most
    ``max_coords`` coordinates per parameter are probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = list(params)
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: objective is not finite")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("grad_check: objective is not finite")
            numeric = (fp - fm) / (2 * eps)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            worst = max(worst, err)
    zero_grad(params)
    return worst

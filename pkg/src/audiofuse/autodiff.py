"""Reverse-mode automatic differentiation over dense numpy tensors.

Every operation on tensors that require gradients records its parents and a backward
rule on the tensor it produces (define-by-run). ``backward`` walks the recorded nodes
reachable from a scalar loss in reverse creation order, which is a valid reverse
topological order because a node is always created after its inputs.
"""

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from src.audiofuse.errors import RankError, ShapeError

_state = threading.local()
_sequence = itertools.count()

SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
GELU_COEFF = 0.044715


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype):
    """Select the dtype of tensors created inside the block (float32 or float64)."""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "no_grad_depth", 0) == 0


@contextmanager
def no_grad():
    _state.no_grad_depth = getattr(_state, "no_grad_depth", 0) + 1
    try:
        yield
    finally:
        _state.no_grad_depth -= 1


def no_grad_scope(f: Callable[[], object]):
    """Run `f` without recording anything on the graph and return its result."""
    with no_grad():
        return f()


ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = ""
        self._seq = next(_sequence)

    # Introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operators

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    # Method forms

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return max_(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable tensor. `decay` marks eligibility for decoupled weight decay."""

    def __init__(self, data, decay: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.decay = decay


def _lift(value: ArrayLike, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], backward_rule, op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        out._parents = parents
        out._backward = backward_rule
        out._op = op
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} would both need expanding; "
            "only scalar and trailing-dimension broadcast is supported"
        )
    return shape


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), rule, "add")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a, b, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), rule, "mul")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def _operands(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    dtype = a.dtype if isinstance(a, Tensor) else (b.dtype if isinstance(b, Tensor) else None)
    return _lift(a, dtype), _lift(b, dtype)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out_data = a.data**exponent

    def rule(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _record(out_data.astype(a.dtype, copy=False), (a,), rule, "power")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _record(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _record(out_data, (a,), lambda g: (g * 0.5 / out_data,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    x = a.data
    inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def rule(g):
        d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    return _record(out_data, (a,), rule, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.dtype, copy=False)
    return _record(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),), "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)),)

    return _record(out_data, (a,), rule, "softmax")


# Contraction and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def rule(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _record(out_data, (a, b), rule, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out_data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _record(out_data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _record(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def slice_(a: Tensor, index) -> Tensor:
    out_data = a.data[index]
    basic = _is_basic_index(index)

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out_data, copy=True), (a,), rule, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    dtype = tensors[0].dtype
    tensors = [_lift(t, dtype) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out_data, tuple(tensors), rule, "concat")


def unfold(a: Tensor, size: int, step: int) -> Tensor:
    """Sliding windows along axis 1 of a (batch, length, channels) tensor.

    Returns (batch, n_windows, size, channels) with n_windows = (length - size) // step + 1.
    """
    if a.ndim != 3:
        raise ShapeError(f"unfold: expected (batch, length, channels), got {a.shape}")
    batch, length, channels = a.shape
    if size > length:
        raise ShapeError(f"unfold: window {size} longer than sequence {length}")
    n_windows = (length - size) // step + 1
    windows = np.lib.stride_tricks.sliding_window_view(a.data, size, axis=1)
    # sliding_window_view puts the window axis last: (batch, L - size + 1, channels, size)
    out_data = np.ascontiguousarray(windows[:, ::step][:, :n_windows].transpose(0, 1, 3, 2))
    span = step * (n_windows - 1) + 1

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        for offset in range(size):
            full[:, offset : offset + span : step, :] += g[:, :, offset, :]
        return (full,)

    return _record(out_data, (a,), rule, "unfold")


# Reductions


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(ax % ndim for ax in axes)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    out_data = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

    def rule(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _record(out_data, (a,), rule, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    out_data = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))

    def rule(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=True),)

    return _record(out_data.astype(a.dtype, copy=False), (a,), rule, "mean")


def max_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; on ties the gradient goes to the first maximal element."""
    if axis is None:
        flat_index = int(np.argmax(a.data))
        out_data = np.asarray(a.data.reshape(-1)[flat_index])
        if keepdims:
            out_data = out_data.reshape((1,) * a.ndim)

        def rule_all(g):
            full = np.zeros(a.size, dtype=a.dtype)
            full[flat_index] = np.asarray(g).reshape(-1)[0]
            return (full.reshape(a.shape),)

        return _record(out_data, (a,), rule_all, "max")

    axis = axis % a.ndim
    index = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out_data = np.take_along_axis(a.data, index, axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(full, index, g, axis=axis)
        return (full,)

    return _record(out_data, (a,), rule, "max")


# Backward pass


def _reachable(loss: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """
    Populate `.grad` of every gradient-requiring tensor reachable from a scalar loss
    Gradients accumulate into existing `.grad` arrays.
    :param loss: Scalar tensor
    :return: None
    """
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in _reachable(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = parent_grad.astype(parent.dtype, copy=False)
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def zeros(shape: Iterable[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape: Iterable[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=default_dtype()), requires_grad=requires_grad)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; the gradient is zero where clamping is active."""
    inside = (a.data >= low) & (a.data <= high)
    return _record(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clip")

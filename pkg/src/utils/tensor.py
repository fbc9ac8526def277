"""
Reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the calling thread's active Tape when at least
one input requires a gradient. Without an active tape nothing is recorded,
which is the inference path (frozen parameters, safe to share across threads).
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.errors import ShapeError, TapeError

logger = logging.getLogger(__name__)

_active = threading.local()

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """Row-major float buffer with an optional gradient slot"""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


TensorLike = Union[Tensor, np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """
    Records operations in forward execution order.

    Usage:
        with Tape() as tape:
            loss = model(...)
        grads = backward(tape, loss, params)
    """

    def __init__(self):
        self._nodes: List[_Node] = []
        self._consumed = False
        self._previous: Optional["Tape"] = None

    def __enter__(self) -> "Tape":
        self._previous = getattr(_active, "tape", None)
        _active.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _active.tape = self._previous
        self._previous = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("cannot record on a tape that has already run backward()")
        self._nodes.append(_Node(output, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(x) into .grad of every tensor reachable from loss"""
        if self._consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True

        for node in self._nodes:
            node.output.grad = None
            for tensor in node.inputs:
                tensor.grad = None

        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            grad_out = node.output.grad
            if grad_out is None:
                continue
            input_grads = node.backward(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = _unbroadcast(grad, tensor.data.shape)
                if tensor.grad is None:
                    tensor.grad = grad
                else:
                    tensor.grad = tensor.grad + grad
            # Intermediate gradients are not needed once propagated
            if node.output.name is None:
                node.output.grad = None


def active_tape() -> Optional[Tape]:
    return getattr(_active, "tape", None)


def backward(tape: Tape, loss: Tensor, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Run the backward pass and return one gradient per parameter (zeros when unreachable)"""
    tape.backward(loss)
    grads: Dict[str, np.ndarray] = {}
    for name, tensor in params.items():
        if tensor.grad is None:
            grads[name] = np.zeros_like(tensor.data)
        else:
            grads[name] = tensor.grad
    return grads


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(value: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _record(out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check("mul", a, b)
    a_data, b_data = a.data, b.data
    return _record(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; a 2-D right operand is shared across the batch"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    a_data, b_data = a.data, b.data

    def backward_fn(g: np.ndarray):
        grad_a = np.matmul(g, np.swapaxes(b_data, -1, -2))
        if b_data.ndim == 2:
            k, m = b_data.shape
            grad_b = a_data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            grad_b = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return grad_a, grad_b

    return _record(np.matmul(a_data, b_data), (a, b), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU"""
    x_data = x.data
    inner = _GELU_C * (x_data + 0.044715 * x_data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x_data * (1.0 + t)

    def backward_fn(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x_data ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x_data * (1.0 - t * t) * d_inner
        return (g * local,)

    return _record(out, (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward_fn(g: np.ndarray):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta_scale: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta_scale"""
    if axis not in (-1, x.ndim - 1):
        raise ShapeError("layer_norm (only the last axis is supported)", x.shape)
    if gamma.shape != x.shape[-1:] or beta_scale.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta_scale.shape)
    x_data, gamma_data = x.data, gamma.data
    mean = x_data.mean(axis=-1, keepdims=True)
    centered = x_data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out = normed * gamma_data + beta_scale.data

    def backward_fn(g: np.ndarray):
        g_normed = g * gamma_data
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, g * normed, g

    return _record(out, (x, gamma, beta_scale), backward_fn)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup (id out of range)", table.shape, (int(ids.min()), int(ids.max())))

    def backward_fn(g: np.ndarray):
        grad_table = np.zeros_like(table.data)
        np.add.at(grad_table, ids, g)
        return (grad_table,)

    return _record(table.data[ids], (table,), backward_fn)


def dropout(x: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * (1.0 / (1.0 - rate))
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", original, tuple(shape)) from None
    return _record(out, (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Pick one position along an axis, dropping that axis"""
    axis = axis % x.ndim
    slicer = [slice(None)] * x.ndim
    slicer[axis] = index
    slicer = tuple(slicer)

    def backward_fn(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[slicer] = g
        return (grad,)

    return _record(x.data[slicer], (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    x_data = x.data
    return _record(np.log(x_data), (x,), lambda g: (g / x_data,))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    x_data = x.data
    inside = ((x_data >= low) & (x_data <= high)).astype(x_data.dtype)
    return _record(np.clip(x_data, low, high), (x,), lambda g: (g * inside,))


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def backward_fn(g: np.ndarray):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis)), (x,), backward_fn)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter worst symmetric relative error |a-n| / (|a|+|n|)"""
    max_relative_error: Dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)


def gradient_check(
    loss_fn: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, np.ndarray],
    h: float = 1e-3,
    min_grad: float = 1e-6,
) -> GradCheckReport:
    """
    Compare analytic gradients against central differences, all in float64.

    Uses the five-point central stencil at step h.
    Entries whose analytic gradient magnitude is at most min_grad are skipped.
    """
    params64 = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    tensors = {name: Tensor(value, requires_grad=True, name=name) for name, value in params64.items()}
    with Tape() as tape:
        loss = loss_fn(tensors)
    analytic = backward(tape, loss, tensors)

    report = GradCheckReport()
    for name, value in params64.items():
        worst = 0.0
        flat = value.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            if abs(grad_flat[i]) <= min_grad:
                continue
            saved = flat[i]
            f = {}
            for step in (-2, -1, 1, 2):
                flat[i] = saved + step * h
                f[step] = loss_fn({n: Tensor(v) for n, v in params64.items()}).item()
            flat[i] = saved
            numeric = (f[-2] - 8.0 * f[-1] + 8.0 * f[1] - f[2]) / (12.0 * h)
            denom = abs(grad_flat[i]) + abs(numeric)
            worst = max(worst, abs(grad_flat[i] - numeric) / denom)
            report.checked_entries += 1
        report.max_relative_error[name] = worst
    logger.debug(f"Gradient check over {report.checked_entries} entries, worst {report.worst:.2e}")
    return report

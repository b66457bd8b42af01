"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape active in the current context
(``with Tape():``) whenever one of their inputs requires a gradient. Outside a
tape nothing is recorded, which is how inference runs.
"""
import contextvars
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from utils.errors import AllMasked, BadTargetId, NonScalarLoss, ShapeMismatch, TensorError

logger = logging.getLogger(__name__)

_active_tape: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)

ArrayLike = Union[np.ndarray, float, Sequence[float]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named learnable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data: ArrayLike):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of executed operations; replayed backwards by ``backward``."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    tape = _active_tape.get()
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf, then clear the tape."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.nodes:
        raise TensorError("backward called on a loss with no recorded operations")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor._tape is tape:
                key = id(tensor)
                grads[key] = grad if key not in grads else grads[key] + grad
            elif tensor.grad is None:
                tensor.grad = np.array(grad, dtype=np.float64)
            else:
                tensor.grad = tensor.grad + grad
    tape.clear()


# core ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast")

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            _unbroadcast(ga, a.shape) if ga is not None else None,
            _unbroadcast(gb, b.shape) if gb is not None else None,
        )

    return _record(out, (a, b), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), _backward)


def mul_scalar(x: Tensor, scalar: float) -> Tensor:
    x = _as_tensor(x)
    return _record(x.data * scalar, (x,), lambda g: (g * scalar,))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    active = x.data > 0
    return _record(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose_last_two(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatch(f"transpose_last_two: needs at least 2 axes, got {x.shape}")
    return _record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"concat_last_axis: leading shapes {a.shape} and {b.shape} differ")
    split = a.shape[-1]

    def _backward(g):
        return g[..., :split], g[..., split:]

    return _record(np.concatenate([a.data, b.data], axis=-1), (a, b), _backward)


def _keep_mask(mask: Optional[np.ndarray], shape: Tuple[int, ...], op: str) -> Optional[np.ndarray]:
    if mask is None:
        return None
    try:
        return np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: mask of shape {np.shape(mask)} does not match {shape}")


def softmax_last_axis(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get exactly 0."""
    x = _as_tensor(x)
    keep = _keep_mask(mask, x.shape, "softmax_last_axis")
    if keep is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        if not keep.any(axis=-1).all():
            raise AllMasked("softmax_last_axis: a row has every position masked")
        logits = np.where(keep, x.data, -np.inf)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, shifted, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), _backward)


def layer_norm_last_axis(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeMismatch(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def _backward(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record(out, (x, gain, bias), _backward)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity (same object) outside training."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _as_tensor(x)
    scale = 1.0 / (1.0 - rate)
    kept = (rng.random(x.shape) >= rate) * scale
    return _record(x.data * kept, (x,), lambda g: (g * kept,))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding_lookup: ids outside [0, {table.shape[0]}) for table {table.shape}")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _record(table.data[ids], (table,), _backward)


def max_over_axis(x: Tensor, axis: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max over ``axis``; masked positions never win and receive no gradient."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    keep = _keep_mask(mask, x.shape, "max_over_axis")
    values = x.data
    if keep is not None:
        if not keep.any(axis=axis).all():
            raise AllMasked("max_over_axis: every position along the pooled axis is masked")
        values = np.where(keep, values, -np.inf)
    idx = np.expand_dims(values.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _record(out, (x,), _backward)


# losses

def cross_entropy(logits: Tensor, targets: np.ndarray, class_weights: Optional[np.ndarray] = None,
                  normalizer: Optional[float] = None) -> Tensor:
    """Weighted mean of -w_c log softmax(logits)[target].

    The mean divides by the sum of applied weights unless ``normalizer`` is
    given; micro-batches pass the whole batch's weight sum so their losses add up.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n_classes = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise BadTargetId(f"cross_entropy: target ids must lie in [0, {n_classes})")

    if class_weights is None:
        weights = np.ones(len(targets))
    else:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (n_classes,) or (class_weights <= 0).any():
            raise ValueError("class_weights must be one positive weight per class")
        weights = class_weights[targets]
    denom = weights.sum() if normalizer is None else normalizer

    rows = np.arange(len(targets))
    log_probs = logits.data - logsumexp(logits.data, axis=1, keepdims=True)
    loss = -(weights * log_probs[rows, targets]).sum() / denom

    def _backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (weights / denom)[:, None] * g,)

    return _record(np.asarray(loss), (logits,), _backward)


_LOG2 = math.log(2.0)


def log_cosh(pred: Tensor, target: Union[Tensor, np.ndarray], normalizer: Optional[float] = None) -> Tensor:
    """Mean log(cosh(pred - target)) via |x| + log1p(exp(-2|x|)) - log 2."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"log_cosh: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    a = np.abs(diff)
    denom = diff.size if normalizer is None else normalizer
    loss = (a + np.log1p(np.exp(-2.0 * a)) - _LOG2).sum() / denom

    def _backward(g):
        slope = np.tanh(diff) * (g / denom)
        return slope, -slope

    return _record(np.asarray(loss), (pred, target), _backward)

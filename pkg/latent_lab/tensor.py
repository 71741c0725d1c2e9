"""Dense tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When recording is enabled and
any input requires a gradient, the output keeps references to its parents and
a closure mapping the output gradient to one gradient per parent. Calling
:func:`backward` on a scalar walks that tape in reverse topological order and
accumulates into the ``grad`` of leaf tensors only, so repeated calls add up
until the grads are cleared.
"""
from __future__ import annotations

import contextlib
import logging
import threading
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .const import DEFAULT_ADAM_EPS, DEFAULT_BETA1, DEFAULT_BETA2
from .errors import (
    DimensionError,
    EmptyLossError,
    GraphError,
    NonFiniteError,
    StateError,
)

_LOGGER = logging.getLogger(__name__)

_RECORDING = threading.local()
_DTYPE = {"value": np.float32}

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def grad_enabled() -> bool:
    """Return whether operations on this thread are recorded."""
    return getattr(_RECORDING, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    previous = grad_enabled()
    _RECORDING.enabled = False
    try:
        yield
    finally:
        _RECORDING.enabled = previous


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Create new tensors with ``dtype`` inside the block."""
    previous = _DTYPE["value"]
    _DTYPE["value"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE["value"] = previous


def get_default_dtype() -> type:
    return _DTYPE["value"]


class Tensor:
    """A dense array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None) -> None:
        self.data = np.asarray(data, dtype=dtype or _DTYPE["value"])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    """Wrap an op result, check it is finite and record it on the tape."""
    if not np.all(np.isfinite(data)):
        _LOGGER.error("Operation %s produced a non-finite value", op)
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def where(condition: np.ndarray, a: Any, b: Any) -> Tensor:
    """Select from ``a`` where ``condition`` holds, else from ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    condition = np.asarray(condition, dtype=bool)
    out = np.where(condition, a.data, b.data)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        zero = np.zeros_like(g)
        return (
            _unbroadcast(np.where(condition, g, zero), a.shape),
            _unbroadcast(np.where(condition, zero, g), b.shape),
        )

    return _make(out, (a, b), backward, "where")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * local,)

    return _make(out, (x,), backward, "gelu")


# Reductions and shape


def tensor_sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64)).astype(x.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(out, (x,), backward, "sum")


def tensor_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return div(tensor_sum(x, axis=axis, keepdims=keepdims), float(count))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"Cannot reshape {x.shape} to {shape}") from err
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty tensor list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise DimensionError(f"Cannot concatenate shapes {[t.shape for t in tensors]}") from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return _make(out, tuple(tensors), backward, "concat")


def _is_advanced(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(x: Tensor, index: Any) -> Tensor:
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)
    advanced = _is_advanced(index)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(x.shape, dtype=g.dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``weight`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab, width = weight.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"Token id outside [0, {vocab})")
    out = weight.data[ids]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(weight.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, width))
        return (full,)

    return _make(out, (weight,), backward, "embedding")


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax over an empty last extent")
    shifted = x.data.astype(np.float64) - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = (exps / exps.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        inner = np.sum(g * probs, axis=-1, keepdims=True, dtype=np.float64)
        return ((probs * (g - inner)).astype(x.dtype),)

    return _make(probs, (x,), backward, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gain and bias."""
    if eps <= 0:
        raise DimensionError("layer_norm eps must be positive")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match width {width}")
    x64 = x.data.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = (normed * gain.data + bias.data).astype(x.dtype)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g64 = g.astype(np.float64)
        g_normed = g64 * gain.data
        gx = inv_std / width * (
            width * g_normed
            - g_normed.sum(axis=-1, keepdims=True)
            - normed * (g_normed * normed).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        g_gain = (g64 * normed).sum(axis=lead)
        g_bias = g64.sum(axis=lead)
        return gx.astype(x.dtype), g_gain.astype(gain.dtype), g_bias.astype(bias.dtype)

    return _make(out, (x, gain, bias), backward, "layer_norm")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax in float64, for scoring outside the tape."""
    shifted = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_masked(logits: Tensor, targets: Any, mask: Any) -> Tensor:
    """Mean negative log-likelihood over the unmasked positions.

    Masked positions contribute neither loss nor gradient; their target ids
    are never read.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim < 1 or logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise DimensionError(
            f"cross_entropy shapes disagree: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy over an all-masked sequence")
    vocab = logits.shape[-1]
    picked = np.where(mask, targets, 0)
    if np.any(picked < 0) or np.any(picked >= vocab):
        raise DimensionError(f"target id outside [0, {vocab}) at an unmasked position")
    logp = log_softmax(logits.data)
    token_logp = np.take_along_axis(logp, picked[..., None], axis=-1)[..., 0]
    loss = -(token_logp * mask).sum() / count

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(logp)
        np.put_along_axis(grad, picked[..., None], np.take_along_axis(grad, picked[..., None], axis=-1) - 1.0, axis=-1)
        grad *= mask[..., None] * (float(g) / count)
        return (grad.astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy_masked")


# Reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every participating leaf's grad."""
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any recorded computation")
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# Parameters and optimizer


class ParameterStore:
    """Named trainable tensors plus their adaptive-moment state."""

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise StateError(f"Parameter {name} already registered")
        param = Tensor(value, requires_grad=True)
        self.params[name] = param
        self.first_moment[name] = np.zeros_like(param.data)
        self.second_moment[name] = np.zeros_like(param.data)
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: object) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def adam_step(
    store: ParameterStore,
    lr: float,
    beta1: float = DEFAULT_BETA1,
    beta2: float = DEFAULT_BETA2,
    eps: float = DEFAULT_ADAM_EPS,
    weight_decay: float = 0.0,
) -> None:
    """Apply one bias-corrected adaptive-moment update and clear gradients."""
    missing = [name for name, p in store.items() if p.grad is None]
    if missing:
        raise StateError(f"Missing gradient for {len(missing)} parameter(s), first: {missing[0]}")
    store.step += 1
    correction1 = 1.0 - beta1**store.step
    correction2 = 1.0 - beta2**store.step
    for name, param in store.items():
        grad = param.grad
        m = store.first_moment[name] = beta1 * store.first_moment[name] + (1.0 - beta1) * grad
        v = store.second_moment[name] = beta2 * store.second_moment[name] + (1.0 - beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        if weight_decay:
            update = update + lr * weight_decay * param.data
        param.data = (param.data - update).astype(param.dtype)
        if not np.all(np.isfinite(param.data)):
            raise NonFiniteError(f"adam_step({name})")
        param.grad = None


def reset_optimizer_state(store: ParameterStore) -> None:
    """Zero every moment and the step counter; parameter values are untouched."""
    for name, param in store.items():
        store.first_moment[name] = np.zeros_like(param.data)
        store.second_moment[name] = np.zeros_like(param.data)
    store.step = 0
    _LOGGER.debug("Optimizer state reset for %d parameters", len(store))

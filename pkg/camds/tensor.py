"""Dense tensors with reverse-mode automatic differentiation.

Images use the batch x channels x height x width layout. Every op returns a new
Tensor and records a backward closure; Parameters are the only arrays that are
mutated in place, and only by the optimizer between steps.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from camds.errors import (
    ConfigurationError,
    GradientError,
    LabelError,
    NormalizationStateError,
    ShapeError,
)

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union[np.ndarray, Sequence, float]

_grad_enabled = True
_kink_log: Optional[list[np.ndarray]] = None


class Tensor:
    """N-dimensional array that remembers the operation which produced it."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_grad_fn")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        dtype: Optional[np.dtype] = None,
        op: str = "leaf",
        _parents: tuple["Tensor", ...] = (),
        _grad_fn: Optional[GradFn] = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        if any(extent < 1 for extent in array.shape):
            raise ShapeError(f"tensor extents must be >= 1, got shape {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> "Graph":
        return backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


class Parameter(Tensor):
    """Trainable leaf tensor with a stable name and an accumulating gradient."""

    __slots__ = ("name",)

    def __init__(self, name: str, data: ArrayLike, dtype: Optional[np.dtype] = None) -> None:
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class Graph:
    """Topologically ordered record of the operations reachable from a root."""

    def __init__(self, root: Tensor) -> None:
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextmanager
def record_kinks() -> Iterator[list[np.ndarray]]:
    """Collect the activation pattern of every relu evaluated inside the block."""
    global _kink_log
    previous = _kink_log
    log: list[np.ndarray] = []
    _kink_log = log
    try:
        yield log
    finally:
        _kink_log = previous


def as_tensor(value: Union[Tensor, ArrayLike], dtype: Optional[np.dtype] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, _parents=tuple(parents), _grad_fn=grad_fn)
    return Tensor(data, op=op)


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.data.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is not connected to any tensor that requires grad")

    graph = Graph(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._grad_fn is None:
            if node.grad is None:
                node.grad = np.array(grad, dtype=node.dtype, copy=True)
            else:
                node.grad += grad
            continue
        for parent, parent_grad in zip(node._parents, node._grad_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return graph


# -- elementwise ----------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g, g

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * factor,)

    return _result(x.data * factor, (x,), grad_fn, "scale")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), grad_fn, "sum")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), grad_fn, "relu")


# -- convolution and pooling ----------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Zero-padded cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(
            f"conv2d: input channels of {x.shape} do not match kernel {weight.shape}"
        )
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d: stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    batch, _, height, width = x.shape
    out_channels, _, kh, kw = weight.shape
    if kh > height + 2 * pad or kw > width + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {out_channels} outputs")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad_x = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # B,oh,ow,Cin,kh,kw
            grad_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    grad_padded[
                        :,
                        :,
                        i : i + stride * (out_h - 1) + 1 : stride,
                        j : j + stride * (out_w - 1) + 1 : stride,
                    ] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = grad_padded[:, :, pad : pad + height, pad : pad + width]
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C] spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D tensor, got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), grad_fn, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """[B,K] x [O,K]^T (+ [O])."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return g @ weight.data, g.T @ x.data, (g.sum(axis=0) if bias is not None else None)

    parents: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn, "linear")


# -- normalization --------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel running statistics of a batchnorm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: bool = False

    @classmethod
    def create(cls, channels: int, dtype: np.dtype = DEFAULT_DTYPE) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    moving_average_fraction: float = 0.7,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [B,C,H,W].

    Train mode normalizes with the (biased) batch statistics and updates
    running <- f * running + (1 - f) * batch, using the unbiased batch variance.
    Eval mode normalizes with the running statistics.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    dtype = x.dtype
    count = x.shape[0] * x.shape[2] * x.shape[3]
    g_view = gamma.data[None, :, None, None]

    if training:
        if count < 2:
            raise ShapeError(f"batch_norm: train mode needs >= 2 values per channel, got {count}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        f = moving_average_fraction
        unbiased = var * (count / (count - 1))
        state.running_mean = (f * state.running_mean + (1 - f) * mean).astype(dtype)
        state.running_var = (f * state.running_var + (1 - f) * unbiased).astype(dtype)
        state.initialized = True
    else:
        if not state.initialized:
            raise NormalizationStateError("uninitialized normalization statistics")
        mean, var = state.running_mean, state.running_var

    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(dtype)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = g_view * x_hat + beta.data[None, :, None, None]

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        d_hat = g * g_view
        if training:
            grad_x = (inv_std[None, :, None, None] / count) * (
                count * d_hat
                - d_hat.sum(axis=axes, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = d_hat * inv_std[None, :, None, None]
        return grad_x, grad_gamma, grad_beta

    return _result(out.astype(dtype), (x, gamma, beta), grad_fn, "batch_norm")


# -- classification -------------------------------------------------------------


def softmax(scores: Tensor) -> Tensor:
    """Row-wise softmax of [B,C] with max subtraction."""
    if scores.ndim != 2:
        raise ShapeError(f"softmax expects [B,C], got {scores.shape}")
    shifted = scores.data - scores.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (probs * (g - (g * probs).sum(axis=1, keepdims=True)),)

    return _result(probs, (scores,), grad_fn, "softmax")


def cross_entropy(scores: Tensor, labels: Union[Sequence[int], np.ndarray]) -> Tensor:
    """Batch mean of -log softmax(scores)[label], fused for stability."""
    if scores.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B,C] scores, got {scores.shape}")
    batch, classes = scores.shape
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    if targets.shape[0] != batch:
        raise ShapeError(f"cross_entropy: {targets.shape[0]} labels for a batch of {batch}")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes}), got {targets.tolist()}")

    shifted = scores.data - scores.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = np.asarray(-log_probs[rows, targets].mean(), dtype=scores.dtype)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1
        return (grad * (g / batch),)

    return _result(loss, (scores,), grad_fn, "cross_entropy")

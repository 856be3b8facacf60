"""SGD with momentum and coupled weight decay."""

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from camds.errors import ShapeError
from camds.tensor import Parameter

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Momentum buffer per parameter name plus the step counter."""

    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def create(cls, parameters: Sequence[Parameter]) -> "OptimizerState":
        return cls({p.name: np.zeros_like(p.data) for p in parameters})


def sgd_step(
    parameters: Sequence[Parameter],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """v <- momentum*v + grad + weight_decay*value;  value <- value - lr*v.

    Gradients are left untouched; the caller zeroes them before the next backward.
    """
    for p in parameters:
        buffer = state.buffers.setdefault(p.name, np.zeros_like(p.data))
        if buffer.shape != p.shape:
            raise ShapeError(f"momentum buffer {p.name}: {buffer.shape} vs parameter {p.shape}")
        buffer *= momentum
        buffer += p.grad
        if weight_decay:
            buffer += weight_decay * p.data
        p.data -= lr * buffer
    state.iteration += 1

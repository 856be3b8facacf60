"""Residual pyramid with class activation map heads.

Three head variants share the same backbone of T stride-2 stages:

* ``fc-baseline`` - GAP -> dense(hidden) -> relu -> dense(C), deepest stage only.
  A small stand-in for a fully connected classifier, not an ImageNet ResNet-18.
* ``cam``         - bias-free 1x1 convolution to C maps at the deepest stage,
  scored by global average pooling.
* ``cam-ds``      - one such head at every stage; the final score is the sum of
  the per-resolution side scores and every side score is supervised.
"""

import copy
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from camds.errors import ConfigurationError, ShapeError
from camds.tensor import (
    BatchNormState,
    Parameter,
    Tensor,
    add,
    batch_norm,
    conv2d,
    cross_entropy,
    global_avg_pool,
    linear,
    no_grad,
    relu,
    scale,
)

logger = logging.getLogger(__name__)

HEADS = ("fc-baseline", "cam", "cam-ds")
CLASS_NAMES = ("normal", "abnormal")
NORMAL, ABNORMAL = 0, 1
MODES = ("train", "eval")


@dataclass
class ModelConfig:
    """Architecture and initialization settings."""

    input_size: int = 64
    num_resolutions: int = 3
    channels_per_stage: tuple[int, ...] = (8, 16, 32)
    num_classes: int = 2
    head: str = "cam-ds"
    blocks_per_stage: int = 2
    seed: int = 0
    dtype: str = "float32"
    moving_average_fraction: float = 0.7
    bn_epsilon: float = 1e-5
    fc_hidden: int = 64
    side_loss_weights: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        self.channels_per_stage = tuple(int(c) for c in self.channels_per_stage)
        if self.side_loss_weights is not None:
            self.side_loss_weights = tuple(float(w) for w in self.side_loss_weights)

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def deepest_size(self) -> int:
        return self.input_size // 2**self.num_resolutions

    def validate(self) -> None:
        t = self.num_resolutions
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if t < 1:
            raise ConfigurationError(f"num_resolutions must be >= 1, got {t}")
        if len(self.channels_per_stage) != t or min(self.channels_per_stage) < 1:
            raise ConfigurationError(
                f"channels_per_stage must list {t} positive widths, got {self.channels_per_stage}"
            )
        if self.num_classes != 2:
            raise ConfigurationError(f"num_classes is fixed at 2, got {self.num_classes}")
        if self.input_size % 2**t != 0:
            raise ConfigurationError(
                f"input_size {self.input_size} is not divisible by 2^{t} = {2**t}"
            )
        if self.deepest_size < 2:
            raise ConfigurationError(
                f"input_size {self.input_size} with {t} resolutions leaves a "
                f"{self.deepest_size}x{self.deepest_size} deepest map (need >= 2x2)"
            )
        if self.blocks_per_stage < 0 or self.fc_hidden < 1 or self.seed < 0:
            raise ConfigurationError("blocks_per_stage, fc_hidden and seed must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.moving_average_fraction <= 1.0 or self.bn_epsilon <= 0:
            raise ConfigurationError("moving_average_fraction must be in [0, 1], bn_epsilon > 0")
        if self.side_loss_weights is not None and len(self.side_loss_weights) != t:
            raise ConfigurationError(
                f"side_loss_weights needs {t} entries, got {len(self.side_loss_weights)}"
            )

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown model setting(s): {', '.join(unknown)}")
        config = cls(**dict(values))
        config.validate()
        return config

    def to_dict(self) -> dict[str, Any]:
        values = asdict(self)
        values["channels_per_stage"] = list(self.channels_per_stage)
        if self.side_loss_weights is not None:
            values["side_loss_weights"] = list(self.side_loss_weights)
        return values


# -- layers -------------------------------------------------------------------


class Conv2d:
    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        *,
        rng: np.random.Generator,
        dtype: np.dtype,
        stride: int = 1,
        pad: int = 0,
        bias: bool = False,
    ) -> None:
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(
            f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), dtype=dtype
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels), dtype=dtype) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def parameters(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class BatchNorm2d:
    def __init__(
        self, name: str, channels: int, *, dtype: np.dtype, fraction: float, epsilon: float
    ) -> None:
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels), dtype=dtype)
        self.beta = Parameter(f"{name}.beta", np.zeros(channels), dtype=dtype)
        self.state = BatchNormState.create(channels, dtype)
        self.fraction = fraction
        self.epsilon = epsilon

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.state, training, self.fraction, self.epsilon
        )

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


class Dense:
    def __init__(
        self, name: str, in_features: int, out_features: int, *,
        rng: np.random.Generator, dtype: np.dtype,
    ) -> None:
        std = np.sqrt(2.0 / in_features)
        self.weight = Parameter(
            f"{name}.weight", rng.normal(0.0, std, size=(out_features, in_features)), dtype=dtype
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class ResidualBlock:
    """conv-bn-relu-conv-bn plus identity shortcut, then relu."""

    def __init__(self, name: str, channels: int, **kw: Any) -> None:
        rng, dtype = kw["rng"], kw["dtype"]
        self.conv1 = Conv2d(f"{name}.conv1", channels, channels, 3, pad=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", channels, **_bn_kwargs(kw))
        self.conv2 = Conv2d(f"{name}.conv2", channels, channels, 3, pad=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", channels, **_bn_kwargs(kw))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = relu(self.bn1(self.conv1(x), training))
        y = self.bn2(self.conv2(y), training)
        return relu(add(x, y))

    def parameters(self) -> list[Parameter]:
        return [*self.conv1.parameters(), *self.bn1.parameters(),
                *self.conv2.parameters(), *self.bn2.parameters()]

    def norm_layers(self) -> list[BatchNorm2d]:
        return [self.bn1, self.bn2]


def _bn_kwargs(kw: Mapping[str, Any]) -> dict[str, Any]:
    return {"dtype": kw["dtype"], "fraction": kw["fraction"], "epsilon": kw["epsilon"]}


class Stage:
    """One resolution: stride-2 3x3 entry conv, batchnorm, relu, residual blocks."""

    def __init__(self, name: str, in_channels: int, channels: int, blocks: int, **kw: Any) -> None:
        self.entry = Conv2d(
            f"{name}.entry.conv", in_channels, channels, 3,
            stride=2, pad=1, rng=kw["rng"], dtype=kw["dtype"],
        )
        self.entry_bn = BatchNorm2d(f"{name}.entry.bn", channels, **_bn_kwargs(kw))
        self.blocks = [ResidualBlock(f"{name}.block{i + 1}", channels, **kw) for i in range(blocks)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = relu(self.entry_bn(self.entry(x), training))
        for block in self.blocks:
            x = block(x, training)
        return x

    def parameters(self) -> list[Parameter]:
        params = [*self.entry.parameters(), *self.entry_bn.parameters()]
        for block in self.blocks:
            params.extend(block.parameters())
        return params

    def norm_layers(self) -> list[BatchNorm2d]:
        layers = [self.entry_bn]
        for block in self.blocks:
            layers.extend(block.norm_layers())
        return layers


# -- model --------------------------------------------------------------------


@dataclass
class ForwardOutput:
    """Scores and maps for one batch.

    ``side_scores[i]`` and ``cams[i]`` belong to resolution ``resolutions[i]``
    (1 = highest). ``cams`` hold the maps before positive clamping.
    """

    head: str
    side_scores: list[Tensor]
    final_scores: Tensor
    cams: list[Tensor] = field(default_factory=list)
    features: list[Tensor] = field(default_factory=list)
    resolutions: tuple[int, ...] = ()

    @property
    def batch_size(self) -> int:
        return self.final_scores.shape[0]


@dataclass
class LossBreakdown:
    """Total training loss and its final/side components (unweighted).

    ``values()`` reports the total as the float64 sum of the reported components, so
    ``total == final + sum(w * side)`` holds exactly for the logged numbers.
    """

    total: Tensor
    final: Tensor
    sides: list[Tensor]
    weights: list[float] = field(default_factory=list)

    def values(self) -> dict[str, Any]:
        final = float(self.final.data)
        sides = [float(s.data) for s in self.sides]
        weights = self.weights or [1.0] * len(sides)
        return {
            "total": final + sum(w * s for w, s in zip(weights, sides)),
            "final": final,
            "sides": sides,
        }


class Model:
    """Residual pyramid plus the configured head."""

    def __init__(self, config: ModelConfig) -> None:
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        kw = {
            "rng": rng,
            "dtype": config.np_dtype,
            "fraction": config.moving_average_fraction,
            "epsilon": config.bn_epsilon,
        }

        self.stages: list[Stage] = []
        in_channels = 3
        for t, channels in enumerate(config.channels_per_stage, start=1):
            self.stages.append(
                Stage(f"stage{t}", in_channels, channels, config.blocks_per_stage, **kw)
            )
            in_channels = channels

        T = config.num_resolutions
        self.cam_heads: "OrderedDict[int, Conv2d]" = OrderedDict()
        self.fc_hidden: Optional[Dense] = None
        self.fc_out: Optional[Dense] = None
        if config.head == "fc-baseline":
            dtype = kw["dtype"]
            self.fc_hidden = Dense("fc.hidden", in_channels, config.fc_hidden, rng=rng, dtype=dtype)
            self.fc_out = Dense(
                "fc.out", config.fc_hidden, config.num_classes, rng=rng, dtype=dtype
            )
        else:
            resolutions = range(1, T + 1) if config.head == "cam-ds" else [T]
            for t in resolutions:
                self.cam_heads[t] = Conv2d(
                    f"cam_head.t{t}",
                    config.channels_per_stage[t - 1],
                    config.num_classes,
                    1,
                    rng=rng,
                    dtype=kw["dtype"],
                    bias=False,
                )

        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ConfigurationError("duplicate parameter names in model")

    # -- introspection ---------------------------------------------------------

    @property
    def head_resolutions(self) -> tuple[int, ...]:
        return tuple(self.cam_heads)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for stage in self.stages:
            params.extend(stage.parameters())
        for head in self.cam_heads.values():
            params.extend(head.parameters())
        if self.fc_hidden is not None and self.fc_out is not None:
            params.extend(self.fc_hidden.parameters())
            params.extend(self.fc_out.parameters())
        return params

    def named_parameters(self) -> "OrderedDict[str, Parameter]":
        return OrderedDict((p.name, p) for p in self.parameters())

    def norm_layers(self) -> "OrderedDict[str, BatchNorm2d]":
        layers: "OrderedDict[str, BatchNorm2d]" = OrderedDict()
        for stage in self.stages:
            for layer in stage.norm_layers():
                layers[layer.name] = layer
        return layers

    @property
    def parameter_count(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameter values and running statistics, by stable name."""
        state: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, p.data.copy()) for name, p in self.named_parameters().items()
        )
        for name, layer in self.norm_layers().items():
            state[f"{name}.running_mean"] = layer.state.running_mean.copy()
            state[f"{name}.running_var"] = layer.state.running_var.copy()
        return state

    def norm_initialized(self) -> dict[str, bool]:
        return {name: layer.state.initialized for name, layer in self.norm_layers().items()}

    def load_state_dict(
        self,
        state: Mapping[str, np.ndarray],
        initialized: Optional[Mapping[str, bool]] = None,
    ) -> None:
        expected = self.state_dict()
        missing = [name for name in expected if name not in state]
        if missing:
            raise ConfigurationError(f"state is missing {len(missing)} entries, e.g. {missing[0]}")
        dtype = self.config.np_dtype
        for name, value in state.items():
            if name not in expected:
                raise ConfigurationError(f"unexpected state entry {name!r}")
            if np.shape(value) != expected[name].shape:
                raise ShapeError(
                    f"{name}: expected shape {expected[name].shape}, got {np.shape(value)}"
                )
        params = self.named_parameters()
        for name, p in params.items():
            p.data[...] = np.asarray(state[name], dtype=dtype)
        for name, layer in self.norm_layers().items():
            layer.state.running_mean = np.array(state[f"{name}.running_mean"], dtype=dtype)
            layer.state.running_var = np.array(state[f"{name}.running_var"], dtype=dtype)
            layer.state.initialized = True if initialized is None else bool(initialized[name])

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    # -- forward ---------------------------------------------------------------

    def forward(self, batch: Union[Tensor, np.ndarray], mode: str = "train") -> ForwardOutput:
        if mode not in MODES:
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
        size = self.config.input_size
        if isinstance(batch, Tensor):
            x = batch
        else:
            x = Tensor(np.asarray(batch, dtype=self.config.np_dtype))
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (size, size):
            raise ShapeError(f"expected a [B,3,{size},{size}] batch, got {x.shape}")
        training = mode == "train"

        features = []
        for stage in self.stages:
            x = stage(x, training)
            features.append(x)

        if self.fc_hidden is not None and self.fc_out is not None:
            scores = self.fc_out(relu(self.fc_hidden(global_avg_pool(x))))
            return ForwardOutput(self.config.head, [scores], scores, features=features)

        cams, sides = [], []
        for t, head in self.cam_heads.items():
            cam = head(features[t - 1])
            cams.append(cam)
            sides.append(global_avg_pool(cam))
        final = sides[0]
        for side in sides[1:]:
            final = add(final, side)
        return ForwardOutput(
            self.config.head, sides, final, cams, features, self.head_resolutions
        )

    __call__ = forward


def build_model(config: ModelConfig) -> Model:
    model = Model(config)
    logger.info(
        "Built %s model: %d resolutions, %d parameters",
        config.head, config.num_resolutions, model.parameter_count,
    )
    return model


def positive_cam(output: ForwardOutput, t: int, c: int) -> np.ndarray:
    """max(0, CAM) of class ``c`` at head index ``t`` (0 = highest resolution), [B,H,W]."""
    if not 0 <= t < len(output.cams):
        raise ConfigurationError(f"resolution index {t} out of range [0, {len(output.cams)})")
    classes = output.cams[t].shape[1]
    if not 0 <= c < classes:
        raise ConfigurationError(f"class index {c} out of range [0, {classes})")
    return np.maximum(output.cams[t].data[:, c], 0)


def compute_loss(
    output: ForwardOutput,
    labels: Union[Sequence[int], np.ndarray],
    side_loss_weights: Optional[Sequence[float]] = None,
) -> LossBreakdown:
    """Deeply supervised loss for cam-ds, plain cross-entropy otherwise.

    cam-ds: total = L_f + sum_t w_t * L_s^t, where L_f is the cross-entropy of the
    summed scores and L_s^t that of resolution t's own scores.
    """
    final = cross_entropy(output.final_scores, labels)
    if output.head != "cam-ds":
        return LossBreakdown(final, final, [])

    sides = [cross_entropy(s, labels) for s in output.side_scores]
    weights = list(side_loss_weights) if side_loss_weights is not None else [1.0] * len(sides)
    total = final
    for weight, side in zip(weights, sides):
        total = add(total, side if weight == 1.0 else scale(side, weight))
    return LossBreakdown(total, final, sides, [float(w) for w in weights])


def predict_proba(output: ForwardOutput) -> np.ndarray:
    """Softmax probability of the abnormal class for each batch item."""
    scores = output.final_scores.data.astype(np.float64)
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp[:, ABNORMAL] / exp.sum(axis=1)


def predict_frames(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode abnormal probabilities for an [N,3,S,S] array."""
    probs = np.zeros(len(images), dtype=np.float64)
    with no_grad():
        for start in range(0, len(images), batch_size):
            output = model.forward(images[start : start + batch_size], mode="eval")
            probs[start : start + batch_size] = predict_proba(output)
    return probs

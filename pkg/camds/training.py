"""SGD training loop with step learning-rate decay and flip augmentation."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from camds.checkpoint import Checkpoint, save_checkpoint
from camds.dataset import FrameSet
from camds.errors import ConfigurationError, DatasetError, ManifestError, TrainingDivergedError
from camds.model import Model, compute_loss, predict_frames
from camds.optim import OptimizerState, sgd_step
from camds.tensor import backward

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = "final.ckpt"
HISTORY_FILE = "history.csv"


@dataclass
class TrainConfig:
    base_lr: float = 5e-3
    lr_decay_factor: float = 0.5
    lr_step: int = 10000
    max_iterations: int = 2000
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    flip_probability: float = 0.5
    vertical_flip: bool = False
    seed: int = 0
    validation_interval: int = 200
    checkpoint_interval: int = 500

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError(
                f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}"
            )
        if self.lr_step < 1:
            raise ConfigurationError(f"lr_step must be >= 1, got {self.lr_step}")
        if self.max_iterations < 0:
            raise ConfigurationError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigurationError("momentum must be in [0, 1) and weight_decay >= 0")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigurationError(
                f"flip_probability must be in [0, 1], got {self.flip_probability}"
            )
        if self.seed < 0 or self.validation_interval < 0 or self.checkpoint_interval < 0:
            raise ConfigurationError("seed and intervals must be non-negative")

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown training setting(s): {', '.join(unknown)}")
        config = cls(**dict(values))
        config.validate()
        return config

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def lr_at(config: TrainConfig, iteration: int) -> float:
    """base_lr * factor ** (iteration // lr_step), for 0 <= iteration <= max_iterations."""
    if not 0 <= iteration <= config.max_iterations:
        raise ConfigurationError(
            f"iteration {iteration} outside schedule [0, {config.max_iterations}]"
        )
    return config.base_lr * config.lr_decay_factor ** (iteration // config.lr_step)


def augment_flip(
    image: np.ndarray, rng: np.random.Generator, p: float, vertical: bool = False
) -> np.ndarray:
    """Mirror left-right with probability ``p`` (and independently up-down if ``vertical``).

    One uniform draw per axis is consumed whether or not the flip happens.
    """
    out = image
    if rng.random() < p:
        out = out[..., ::-1]
    if vertical and rng.random() < p:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


# -- history ------------------------------------------------------------------


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    lr: float
    loss_total: float
    loss_final: float
    loss_sides: tuple[float, ...] = ()
    val_accuracy: float = float("nan")


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)

    def append(self, row: HistoryRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError(
                f"history iterations must increase: {row.iteration} after {self.rows[-1].iteration}"
            )
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def truncate(self, iteration: int) -> None:
        self.rows = [r for r in self.rows if r.iteration < iteration]

    @property
    def validation(self) -> list[HistoryRow]:
        return [r for r in self.rows if not math.isnan(r.val_accuracy)]

    def header(self) -> list[str]:
        sides = len(self.rows[0].loss_sides) if self.rows else 0
        return [
            "iteration", "lr", "loss_total", "loss_final",
            *(f"loss_side_{t}" for t in range(1, sides + 1)),
            "val_accuracy",
        ]

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.header())
            for r in self.rows:
                writer.writerow(
                    [
                        r.iteration,
                        repr(r.lr),
                        repr(r.loss_total),
                        repr(r.loss_final),
                        *(repr(s) for s in r.loss_sides),
                        repr(r.val_accuracy),
                    ]
                )

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TrainHistory":
        history = cls()
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[:4] != ["iteration", "lr", "loss_total", "loss_final"]:
                raise ManifestError("not a training history file", line=1)
            for row in reader:
                if len(row) != len(header):
                    raise ManifestError(
                        f"expected {len(header)} fields, got {len(row)}", line=reader.line_num
                    )
                try:
                    values = [float(v) for v in row[1:]]
                    history.append(
                        HistoryRow(int(row[0]), values[0], values[1], values[2],
                                   tuple(values[3:-1]), values[-1])
                    )
                except ValueError as exc:
                    raise ManifestError(str(exc), line=reader.line_num) from exc
        return history


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    history: TrainHistory
    checkpoint: Checkpoint
    final_path: Optional[Path] = None
    digest: Optional[str] = None


def evaluate_accuracy(model: Model, frames: Optional[FrameSet], batch_size: int = 64) -> float:
    """Eval-mode frame accuracy at threshold 0.5; NaN for an empty or missing set."""
    if frames is None or len(frames) == 0:
        return float("nan")
    probs = predict_frames(model, frames.images, batch_size)
    return float(np.mean((probs >= 0.5).astype(np.int64) == frames.labels))


class Trainer:
    """Owns the model, optimizer state, data order and generator of one run."""

    def __init__(
        self,
        model: Model,
        config: TrainConfig,
        out_dir: Optional[Union[str, Path]] = None,
        side_loss_weights: Optional[Sequence[float]] = None,
    ) -> None:
        config.validate()
        self.model = model
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if side_loss_weights is None:
            side_loss_weights = model.config.side_loss_weights
        self.side_loss_weights = side_loss_weights
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = OptimizerState.create(model.parameters())
        self.iteration = 0
        self.order: Optional[np.ndarray] = None
        self.cursor = 0
        self.history = TrainHistory()

    # -- state -------------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model=self.model,
            iteration=self.iteration,
            optimizer=self.optimizer,
            rng_state=self.rng.bit_generator.state,
            data_order=None if self.order is None else [int(i) for i in self.order],
            cursor=self.cursor,
            train_config=self.config.to_dict(),
        )

    def restore(self, checkpoint: Checkpoint) -> None:
        """Continue from ``checkpoint`` exactly where the saved run stopped."""
        self.model.load_state_dict(
            checkpoint.model.state_dict(), checkpoint.model.norm_initialized()
        )
        if checkpoint.optimizer is not None:
            self.optimizer = OptimizerState(
                {k: v.copy() for k, v in checkpoint.optimizer.buffers.items()},
                checkpoint.optimizer.iteration,
            )
        if checkpoint.rng_state is not None:
            self.rng.bit_generator.state = checkpoint.rng_state
        self.order = None if checkpoint.data_order is None else np.array(checkpoint.data_order)
        self.cursor = checkpoint.cursor
        self.iteration = checkpoint.iteration
        self.history.truncate(self.iteration)
        logger.info("Resuming at iteration %d", self.iteration)

    # -- loop --------------------------------------------------------------------

    def _next_indices(self, n: int) -> np.ndarray:
        if self.order is None or self.cursor >= len(self.order):
            self.order = self.rng.permutation(n)
            self.cursor = 0
        # the last batch of an epoch may be short
        indices = self.order[self.cursor : self.cursor + self.config.batch_size]
        self.cursor += len(indices)
        return indices

    def _save(self, name: str) -> str:
        assert self.out_dir is not None
        return save_checkpoint(self.checkpoint(), self.out_dir / name)

    def step(self, train_set: FrameSet) -> HistoryRow:
        cfg = self.config
        indices = self._next_indices(len(train_set))
        batch = np.stack(
            [
                augment_flip(train_set.images[i], self.rng, cfg.flip_probability, cfg.vertical_flip)
                for i in indices
            ]
        )
        labels = train_set.labels[indices]
        lr = lr_at(cfg, self.iteration)

        self.model.zero_grad()
        output = self.model.forward(batch, mode="train")
        loss = compute_loss(output, labels, self.side_loss_weights)
        values = loss.values()
        if not all(math.isfinite(v) for v in [values["total"], values["final"], *values["sides"]]):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {self.iteration} (lr {lr:g}): "
                f"total={values['total']}, final={values['final']}, sides={values['sides']}"
            )
        backward(loss.total)
        sgd_step(self.model.parameters(), self.optimizer, lr, cfg.momentum, cfg.weight_decay)
        row = HistoryRow(
            self.iteration, lr, values["total"], values["final"], tuple(values["sides"])
        )
        self.iteration += 1
        return row

    def fit(
        self,
        train_set: FrameSet,
        val_set: Optional[FrameSet] = None,
        resume: Optional[Checkpoint] = None,
    ) -> TrainResult:
        if len(train_set) == 0:
            raise DatasetError("training split is empty")
        cfg = self.config
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            history_path = self.out_dir / HISTORY_FILE
            if resume is not None and history_path.exists():
                self.history = TrainHistory.from_csv(history_path)
        if resume is not None:
            self.restore(resume)

        logger.info(
            "Training %s for %d iterations on %d frames (batch %d, lr %g)",
            self.model.config.head, cfg.max_iterations, len(train_set), cfg.batch_size, cfg.base_lr,
        )
        while self.iteration < cfg.max_iterations:
            row = self.step(train_set)
            done = self.iteration
            validate = cfg.validation_interval > 0 and (
                done % cfg.validation_interval == 0 or done == cfg.max_iterations
            )
            if validate:
                accuracy = evaluate_accuracy(self.model, val_set)
                row = HistoryRow(
                    row.iteration, row.lr, row.loss_total, row.loss_final, row.loss_sides, accuracy
                )
                logger.info(
                    "iter %d  lr %g  loss %.4f (final %.4f, sides %s)  val acc %.4f",
                    done, row.lr, row.loss_total, row.loss_final,
                    " ".join(f"{s:.4f}" for s in row.loss_sides) or "-", accuracy,
                )
            else:
                logger.debug("iter %d  lr %g  loss %.5f", done, row.lr, row.loss_total)
            self.history.append(row)
            save = cfg.checkpoint_interval > 0 and (
                done % cfg.checkpoint_interval == 0 and done < cfg.max_iterations
            )
            if self.out_dir is not None and (save or validate):
                # history on disk always covers the latest checkpoint
                self.history.to_csv(self.out_dir / HISTORY_FILE)
                if save:
                    self._save(f"checkpoint_{done}.ckpt")

        final_path = digest = None
        if self.out_dir is not None:
            final_path = self.out_dir / FINAL_CHECKPOINT
            digest = self._save(FINAL_CHECKPOINT)
            self.history.to_csv(self.out_dir / HISTORY_FILE)
        return TrainResult(self.model, self.history, self.checkpoint(), final_path, digest)


def train(
    model: Model,
    train_set: FrameSet,
    config: TrainConfig,
    val_set: Optional[FrameSet] = None,
    out_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
) -> TrainResult:
    return Trainer(model, config, out_dir).fit(train_set, val_set, resume)

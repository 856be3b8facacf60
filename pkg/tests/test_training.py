"""Tests for SGD, the learning-rate schedule and the training loop."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from camds.checkpoint import file_digest, load_checkpoint
from camds.dataset import FrameSet
from camds.errors import ConfigurationError, DatasetError, ShapeError, TrainingDivergedError
from camds.model import build_model, compute_loss
from camds.optim import OptimizerState, sgd_step
from camds.tensor import Parameter, backward, mul
from camds.tensor import sum as tsum
from camds.training import (
    FINAL_CHECKPOINT,
    HISTORY_FILE,
    HistoryRow,
    TrainConfig,
    Trainer,
    TrainHistory,
    augment_flip,
    evaluate_accuracy,
    lr_at,
    train,
)


def _frames(rng, n=6, size=16):
    images = rng.uniform(0.0, 1.0, size=(n, 3, size, size)).astype(np.float32)
    return FrameSet(
        images,
        (np.arange(n) % 2).astype(np.int64),
        [f"P{i:03d}" for i in range(n)],
        list(range(n)),
        [f"frames/f{i}.ppm" for i in range(n)],
    )


def _config(**overrides):
    values = dict(
        base_lr=0.01,
        max_iterations=4,
        batch_size=2,
        validation_interval=0,
        checkpoint_interval=0,
        seed=3,
    )
    values.update(overrides)
    return TrainConfig(**values)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"base_lr": 0.0},
            {"lr_decay_factor": 1.5},
            {"lr_step": 0},
            {"max_iterations": -1},
            {"momentum": 1.0},
            {"weight_decay": -0.1},
            {"batch_size": 0},
            {"flip_probability": 2.0},
            {"validation_interval": -5},
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ConfigurationError):
            TrainConfig(**overrides).validate()

    def test_from_dict(self):
        assert TrainConfig.from_dict({"batch_size": 4}).batch_size == 4
        with pytest.raises(ConfigurationError, match="epochs"):
            TrainConfig.from_dict({"epochs": 3})


class TestSchedule:
    def test_step_decay(self):
        config = TrainConfig(base_lr=0.01, lr_decay_factor=0.5, lr_step=10, max_iterations=30)
        assert lr_at(config, 0) == 0.01
        assert lr_at(config, 9) == 0.01
        assert lr_at(config, 10) == 0.005
        assert lr_at(config, 30) == 0.00125

    def test_default_schedule(self):
        config = TrainConfig(max_iterations=45000)
        assert lr_at(config, 0) == 5e-3
        assert lr_at(config, 10000) == 2.5e-3
        assert lr_at(config, 40000) == pytest.approx(3.125e-4)
        assert lr_at(config, 45000) == lr_at(config, 40000)

    @pytest.mark.parametrize("iteration", [-1, 31])
    def test_outside_schedule(self, iteration):
        config = TrainConfig(max_iterations=30)
        with pytest.raises(ConfigurationError):
            lr_at(config, iteration)


class TestAugmentFlip:
    def test_always_and_never(self, rng):
        image = rng.uniform(size=(3, 4, 5))
        assert_array_equal(augment_flip(image, rng, 1.0), image[:, :, ::-1])
        assert_array_equal(augment_flip(image, rng, 0.0), image)
        assert_array_equal(augment_flip(image, rng, 1.0, vertical=True), image[:, ::-1, ::-1])

    @pytest.mark.parametrize("vertical,draws", [(False, 1), (True, 2)])
    def test_consumes_one_draw_per_axis(self, vertical, draws):
        a = np.random.default_rng(5)
        b = np.random.default_rng(5)
        augment_flip(np.zeros((3, 2, 2)), a, 0.5, vertical=vertical)
        b.random(draws)
        assert a.random() == b.random()

    def test_flip_frequency(self):
        rng = np.random.default_rng(11)
        image = np.array([[[0.0, 1.0]]])
        flips = sum(augment_flip(image, rng, 0.5)[0, 0, 0] == 1.0 for _ in range(10000))
        assert 0.48 <= flips / 10000 <= 0.52


class TestSgd:
    def test_momentum_and_weight_decay(self):
        p = Parameter("w", np.array([1.0]), dtype=np.float64)
        state = OptimizerState.create([p])
        for _ in range(2):
            p.grad = np.array([0.5])
            sgd_step([p], state, lr=0.1, momentum=0.9, weight_decay=0.1)
        # v1 = 0.5 + 0.1 = 0.6, w1 = 0.94; v2 = 0.54 + 0.5 + 0.094, w2 = 0.94 - 0.1134
        assert_allclose(p.data, [0.8266])
        assert_allclose(state.buffers["w"], [1.134])
        assert state.iteration == 2

    def test_quadratic_bowl_converges(self):
        x = Parameter("x", np.array([1.0, 1.0]), dtype=np.float64)
        state = OptimizerState.create([x])
        for _ in range(200):
            x.zero_grad()
            backward(tsum(mul(x, x)))
            sgd_step([x], state, lr=0.05, momentum=0.9, weight_decay=0.0)
        assert np.linalg.norm(x.data) < 1e-3

    def test_zero_learning_rate_changes_nothing(self, rng):
        p = Parameter("w", rng.normal(size=(3, 4)), dtype=np.float64)
        before = p.data.copy()
        state = OptimizerState.create([p])
        for _ in range(3):
            p.grad = rng.normal(size=(3, 4))
            sgd_step([p], state, lr=0.0, momentum=0.9, weight_decay=5e-4)
        assert_array_equal(p.data, before)
        assert np.any(state.buffers["w"] != 0.0)

    def test_weight_decay_shrinks_without_gradient(self):
        p = Parameter("w", np.array([1.0, -2.0, 3.0]), dtype=np.float64)
        state = OptimizerState.create([p])
        previous = np.abs(p.data)
        for _ in range(5):
            sgd_step([p], state, lr=0.1, momentum=0.0, weight_decay=0.1)
            assert np.all(np.abs(p.data) < previous)
            assert_array_equal(np.sign(p.data), [1.0, -1.0, 1.0])
            previous = np.abs(p.data)

    def test_small_step_lowers_the_loss(self, tiny_config, rng):
        model = build_model(tiny_config(dtype="float64"))
        batch = rng.uniform(0.0, 1.0, size=(4, 3, 16, 16))
        labels = np.array([0, 1, 1, 0])
        loss = compute_loss(model.forward(batch, mode="train"), labels).total
        backward(loss)
        sgd_step(
            model.parameters(), OptimizerState.create(model.parameters()),
            lr=1e-5, momentum=0.0, weight_decay=0.0,
        )
        after = compute_loss(model.forward(batch, mode="train"), labels).total
        assert after.item() < loss.item()

    def test_buffer_shape_mismatch(self):
        p = Parameter("w", np.zeros(3), dtype=np.float64)
        state = OptimizerState({"w": np.zeros(2)})
        with pytest.raises(ShapeError):
            sgd_step([p], state, lr=0.1, momentum=0.9, weight_decay=0.0)


class TestHistory:
    def test_iterations_must_increase(self):
        history = TrainHistory()
        history.append(HistoryRow(0, 0.1, 1.0, 1.0))
        with pytest.raises(ValueError):
            history.append(HistoryRow(0, 0.1, 1.0, 1.0))

    def test_csv_keeps_values_exactly(self, tmp_path):
        history = TrainHistory()
        history.append(HistoryRow(0, 0.005, 0.6931471805599453, 0.4, (0.1, 0.2)))
        history.append(HistoryRow(1, 0.005, 0.5, 0.3, (0.1, 1 / 3), 0.75))
        path = tmp_path / HISTORY_FILE
        history.to_csv(path)
        assert path.read_text().splitlines()[0] == (
            "iteration,lr,loss_total,loss_final,loss_side_1,loss_side_2,val_accuracy"
        )
        loaded = TrainHistory.from_csv(path)
        assert loaded.rows[1] == history.rows[1]
        assert math.isnan(loaded.rows[0].val_accuracy)
        assert [r.iteration for r in loaded.validation] == [1]

    def test_truncate(self):
        history = TrainHistory([HistoryRow(i, 0.1, 1.0, 1.0) for i in range(5)])
        history.truncate(3)
        assert [r.iteration for r in history.rows] == [0, 1, 2]


class TestTrainer:
    def test_zero_iterations_emits_initial_checkpoint(self, tiny_config, rng, tmp_path):
        model = build_model(tiny_config())
        result = train(model, _frames(rng), _config(max_iterations=0), out_dir=tmp_path)
        assert result.checkpoint.iteration == 0
        assert len(result.history) == 0
        assert (tmp_path / FINAL_CHECKPOINT).exists()
        assert result.digest == file_digest(tmp_path / FINAL_CHECKPOINT)

    def test_outputs(self, tiny_config, rng, tmp_path):
        config = _config(max_iterations=5, checkpoint_interval=2, validation_interval=2)
        frames = _frames(rng)
        result = train(build_model(tiny_config()), frames, config, val_set=frames, out_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [
            "checkpoint_2.ckpt",
            "checkpoint_4.ckpt",
            FINAL_CHECKPOINT,
        ]
        assert [r.iteration for r in result.history.rows] == [0, 1, 2, 3, 4]
        assert [r.iteration for r in result.history.validation] == [1, 3, 4]
        assert all(len(r.loss_sides) == 2 for r in result.history.rows)
        assert (tmp_path / HISTORY_FILE).exists()

    def test_same_seed_same_final_checkpoint(self, tiny_config, rng, tmp_path):
        frames = _frames(rng)
        a = train(build_model(tiny_config()), frames, _config(), out_dir=tmp_path / "a")
        b = train(build_model(tiny_config()), frames, _config(), out_dir=tmp_path / "b")
        c = train(build_model(tiny_config()), frames, _config(seed=4), out_dir=tmp_path / "c")
        assert a.digest == b.digest
        assert a.digest != c.digest

    def test_resume_is_bit_exact(self, tiny_config, rng, tmp_path):
        frames = _frames(rng, n=5)
        config = _config(max_iterations=6, checkpoint_interval=3, flip_probability=0.5)
        straight = train(build_model(tiny_config()), frames, config, out_dir=tmp_path / "a")

        checkpoint = load_checkpoint(tmp_path / "a" / "checkpoint_3.ckpt")
        assert checkpoint.iteration == 3
        resumed = Trainer(build_model(tiny_config()), config, tmp_path / "b").fit(
            frames, resume=checkpoint
        )
        assert resumed.digest == straight.digest

    def test_resume_continues_history_file(self, tiny_config, rng, tmp_path):
        frames = _frames(rng, n=5)
        config = _config(max_iterations=6, checkpoint_interval=3)
        train(build_model(tiny_config()), frames, config, out_dir=tmp_path)
        checkpoint = load_checkpoint(tmp_path / "checkpoint_3.ckpt")
        trainer = Trainer(build_model(tiny_config()), config, tmp_path)
        result = trainer.fit(frames, resume=checkpoint)
        assert [r.iteration for r in result.history.rows] == [0, 1, 2, 3, 4, 5]

    def test_history_survives_a_crash_after_a_checkpoint(
        self, tiny_config, rng, tmp_path, monkeypatch
    ):
        frames = _frames(rng, n=5)
        config = _config(max_iterations=6, checkpoint_interval=3)
        train(build_model(tiny_config()), frames, config, out_dir=tmp_path / "straight")

        step = Trainer.step

        def failing_step(trainer, train_set):
            if trainer.iteration == 4:
                raise TrainingDivergedError("stopped")
            return step(trainer, train_set)

        monkeypatch.setattr(Trainer, "step", failing_step)
        crashed = tmp_path / "crashed"
        with pytest.raises(TrainingDivergedError):
            train(build_model(tiny_config()), frames, config, out_dir=crashed)
        assert [r.iteration for r in TrainHistory.from_csv(crashed / HISTORY_FILE).rows] == [
            0, 1, 2,
        ]
        monkeypatch.undo()

        checkpoint = load_checkpoint(crashed / "checkpoint_3.ckpt")
        Trainer(build_model(tiny_config()), config, crashed).fit(frames, resume=checkpoint)
        assert (crashed / HISTORY_FILE).read_text() == (
            tmp_path / "straight" / HISTORY_FILE
        ).read_text()

    def test_partial_last_batch(self, tiny_config, rng):
        trainer = Trainer(build_model(tiny_config()), _config(batch_size=2))
        frames = _frames(rng, n=5)
        for _ in range(3):
            trainer.step(frames)
        assert trainer.cursor == 5
        trainer.step(frames)
        assert trainer.cursor == 2

    def test_non_finite_loss(self, tiny_config, rng):
        model = build_model(tiny_config())
        model.cam_heads[2].weight.data[...] = np.nan
        with pytest.raises(TrainingDivergedError, match="iteration 0"):
            train(model, _frames(rng), _config())

    def test_empty_training_set(self, tiny_config, rng):
        with pytest.raises(DatasetError):
            train(build_model(tiny_config()), _frames(rng).subset([]), _config())

    def test_evaluate_accuracy_without_frames(self, tiny_config):
        assert math.isnan(evaluate_accuracy(build_model(tiny_config()), None))

    def test_fc_baseline_trains(self, tiny_config, rng):
        result = train(build_model(tiny_config("fc-baseline")), _frames(rng), _config())
        assert all(r.loss_sides == () for r in result.history.rows)
        assert all(math.isfinite(r.loss_total) for r in result.history.rows)

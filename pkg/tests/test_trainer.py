"""
Tests for the trainer: learning-rate schedule, SGD, the synthetic pair
generator and full training runs on the tiny embedding.
"""

import math

import numpy as np
import pytest

from app.config import ExperimentConfig, TrainConfig
from app.errors import ConfigError, GraphError
from app.siamese import SiameseModel
from app.tensor import Graph, Tensor4
from app.trainer import (
    IntervalLosses,
    PairSpec,
    RunStreams,
    compute_losses,
    fit,
    generate_pair,
    lr_schedule,
    make_batch,
    sgd_step,
    steps_per_epoch,
    train_step,
)


def _setup(config: ExperimentConfig):
    embedding = config.embedding_config
    streams = RunStreams.from_seed(config.train.seed, embedding.conv_count)
    model = SiameseModel(embedding, rng=streams.init, score_scale=config.train.score_scale)
    return model, streams, PairSpec.from_config(embedding, config.train.data)


def _template_match(exemplar: np.ndarray, search: np.ndarray) -> tuple[int, int]:
    """Center of the search window with the highest zero-mean NCC against the exemplar."""
    size = exemplar.shape[-1]
    windows = np.lib.stride_tricks.sliding_window_view(search, (size, size), axis=(1, 2))
    rows, cols = windows.shape[1:3]
    windows = windows.transpose(1, 2, 0, 3, 4).reshape(rows, cols, -1)
    windows = windows - windows.mean(axis=-1, keepdims=True)
    template = exemplar.ravel() - exemplar.mean()
    score = (windows @ template) / (np.linalg.norm(windows, axis=-1) * np.linalg.norm(template) + 1e-12)
    top, left = np.unravel_index(score.argmax(), score.shape)
    return int(top) + size // 2, int(left) + size // 2


def _trained_state(config: ExperimentConfig) -> dict[str, np.ndarray]:
    model, streams, spec = _setup(config)
    fit(model, config.train, streams, spec)
    return model.state_dict()


class TestLrSchedule:
    """Tests for lr_schedule."""

    def test_endpoints(self):
        """Test 1e-3 at the first epoch and 1e-5 at the last of 50."""
        cfg = TrainConfig()

        assert lr_schedule(0, cfg) == pytest.approx(1e-3)
        assert lr_schedule(49, cfg) == pytest.approx(1e-5)

    def test_fifty_epoch_factor(self):
        """Test the per-epoch factor 10^(-2/49) of the 50-epoch schedule."""
        cfg = TrainConfig()

        assert lr_schedule(1, cfg) / lr_schedule(0, cfg) == pytest.approx(10 ** (-2 / 49), abs=1e-12)

    def test_geometric(self):
        """Test a constant ratio between consecutive epochs."""
        cfg = TrainConfig(epochs=5, lr_initial=0.1, lr_final=0.001)
        rates = [lr_schedule(epoch, cfg) for epoch in range(5)]

        ratios = [b / a for a, b in zip(rates, rates[1:])]

        np.testing.assert_allclose(ratios, ratios[0])
        assert all(b < a for a, b in zip(rates, rates[1:]))

    def test_single_epoch(self):
        """Test that a one-epoch schedule uses lr_initial."""
        assert lr_schedule(0, TrainConfig(epochs=1, lr_initial=0.02, lr_final=0.001)) == 0.02

    def test_out_of_range(self):
        """Test that epochs outside the schedule are rejected."""
        with pytest.raises(ValueError):
            lr_schedule(50, TrainConfig())


class TestSgdStep:
    """Tests for sgd_step."""

    def test_update_without_decay(self):
        """Test w - lr * g."""
        w = Tensor4.from_values([1.0, 2.0], (1, 1, 1, 2), requires_grad=True)
        w.grad = np.full(w.dims, 0.5)

        sgd_step([w], 0.1, 0.0)

        np.testing.assert_allclose(w.data.ravel(), [0.95, 1.95])

    def test_update_with_decay(self):
        """Test w - lr * (g + wd * w)."""
        w = Tensor4.from_values([1.0, 2.0], (1, 1, 1, 2), requires_grad=True)
        w.grad = np.full(w.dims, 0.5)

        sgd_step([w], 0.1, 0.1)

        np.testing.assert_allclose(w.data.ravel(), [0.94, 1.93])

    def test_gradients_reset(self):
        """Test that gradients are zero after the step."""
        w = Tensor4.ones((1, 1, 1, 2), requires_grad=True)
        w.grad = np.ones(w.dims)

        sgd_step([w], 0.1, 0.0)

        np.testing.assert_array_equal(w.grad, np.zeros(w.dims))

    def test_missing_gradient(self):
        """Test that a parameter without gradient stops the step before any update."""
        done = Tensor4.ones((1, 1, 1, 1), requires_grad=True, name="done")
        done.grad = np.ones(done.dims)
        missing = Tensor4.ones((1, 1, 1, 1), requires_grad=True, name="missing")

        with pytest.raises(GraphError, match="missing"):
            sgd_step([done, missing], 0.1, 0.0)
        assert done.item() == 1.0


class TestRunStreams:
    """Tests for RunStreams."""

    def test_same_seed_same_streams(self):
        """Test that a seed fixes every stream."""
        first, second = RunStreams.from_seed(4, 3), RunStreams.from_seed(4, 3)

        assert first.init.random() == second.init.random()
        assert first.data.random() == second.data.random()
        assert first.scd[3].random() == second.scd[3].random()

    def test_streams_are_independent(self):
        """Test that the streams differ from each other."""
        streams = RunStreams.from_seed(4, 2)

        assert len({streams.init.random(), streams.data.random(), streams.eval.random()}) == 3

    def test_one_scd_stream_per_conv(self):
        """Test 1-based per-layer SCD streams."""
        assert sorted(RunStreams.from_seed(0, 5).scd) == [1, 2, 3, 4, 5]


class TestPairGenerator:
    """Tests for generate_pair and make_batch."""

    def test_dims_and_center_range(self, rng):
        """Test image dims and that the target center keeps a full exemplar window."""
        spec = PairSpec(exemplar_size=8, search_size=20, target_size=4)

        for _ in range(10):
            pair = generate_pair(rng, spec)
            assert pair.exemplar.shape == (3, 8, 8)
            assert pair.search.shape == (3, 20, 20)
            assert all(4 <= value <= 16 for value in pair.center)

    def test_target_identity_without_jitter(self, rng):
        """Test that with jitter off the exemplar target reappears exactly at the center."""
        spec = PairSpec(exemplar_size=8, search_size=20, target_size=4, jitter=False, center=(10, 7))

        pair = generate_pair(rng, spec)

        np.testing.assert_array_equal(pair.exemplar[:, 2:6, 2:6], pair.search[:, 8:12, 5:9])
        assert pair.center == (10, 7)

    def test_deterministic(self):
        """Test that equal seeds render equal pairs."""
        spec = PairSpec(exemplar_size=8, search_size=12, target_size=4)

        first = generate_pair(np.random.default_rng(3), spec)
        second = generate_pair(np.random.default_rng(3), spec)

        np.testing.assert_array_equal(first.search, second.search)
        assert first.center == second.center

    def test_target_larger_than_exemplar(self, rng):
        """Test that an oversized target is a configuration error."""
        with pytest.raises(ConfigError):
            generate_pair(rng, PairSpec(exemplar_size=8, search_size=12, target_size=9))

    def test_spec_from_config(self, tiny_config):
        """Test target size from the exemplar fraction."""
        spec = PairSpec.from_config(tiny_config.embedding_config, tiny_config.train.data)

        assert (spec.exemplar_size, spec.search_size, spec.target_size) == (8, 12, 4)
        assert spec.distractors == 2

    @pytest.mark.slow
    def test_template_match_finds_target(self):
        """Test that pixel-space NCC template matching finds the center within 2 px in 95% of pairs."""
        rng = np.random.default_rng(0)
        spec = PairSpec(exemplar_size=32, search_size=64, target_size=16)
        hits = 0
        for _ in range(1000):
            pair = generate_pair(rng, spec)
            found = _template_match(pair.exemplar, pair.search)
            hits += max(abs(found[0] - pair.center[0]), abs(found[1] - pair.center[1])) <= 2

        assert hits >= 950

    def test_make_batch(self, rng):
        """Test batch tensor dims and centers."""
        batch = make_batch(rng, PairSpec(exemplar_size=8, search_size=12, target_size=4), 3)

        assert batch.size == 3
        assert batch.exemplars.dims == (3, 3, 8, 8)
        assert batch.search.dims == (3, 3, 12, 12)
        assert batch.centers.shape == (3, 2)


class TestTrainStep:
    """Tests for compute_losses and train_step."""

    def test_breakdown_has_scd_term(self, tiny_config):
        """Test that an SCD run reports the per-layer loss of conv2."""
        model, streams, spec = _setup(tiny_config)
        batch = make_batch(streams.data, spec, 2)

        breakdown = compute_losses(model, batch, tiny_config.train, streams.scd)

        assert list(breakdown.scd_per_layer) == [2]
        assert math.isfinite(breakdown.combined.item())

    def test_control_has_no_scd_term(self, tiny_config):
        """Test that disabling SCD leaves only the task loss."""
        config = tiny_config.updated(scd={"enabled": False, "layers": []})
        model, streams, spec = _setup(config)

        breakdown = compute_losses(model, make_batch(streams.data, spec, 2), config.train)

        assert breakdown.scd_per_layer == {}
        assert breakdown.combined.item() == breakdown.task_loss.item()

    def test_exemplar_branch_included(self, tiny_config):
        """Test that the exemplar-branch option still yields one loss per layer."""
        config = tiny_config.updated(scd={"include_exemplar_branch": True})
        model, streams, spec = _setup(config)

        breakdown = compute_losses(model, make_batch(streams.data, spec, 2), config.train, streams.scd)

        assert list(breakdown.scd_per_layer) == [2]

    def test_gradient_is_weighted_sum(self, tiny_config):
        """Test d combined = alpha * d task + beta * d scd for a single SCD layer."""
        config = tiny_config.updated(scd={"alpha": 1.0, "beta": 2.0, "epsilon": 0.05})
        model, streams, spec = _setup(config)
        batch = make_batch(streams.data, spec, 2)

        def grads(select):
            model.zero_grad()
            with Graph() as graph:
                breakdown = compute_losses(model, batch, config.train, RunStreams.from_seed(0, 2).scd)
                graph.backward(select(breakdown))
            return [param.grad.copy() for param in model.parameters()]

        combined = grads(lambda b: b.combined)
        task = grads(lambda b: b.task_loss)
        scd = grads(lambda b: b.scd_per_layer[2])

        for total, t, s in zip(combined, task, scd):
            np.testing.assert_allclose(total, t + 2.0 * s, rtol=1e-9, atol=1e-12)

    def test_step_updates_parameters(self, tiny_config):
        """Test that a step changes the weights and leaves zeroed gradients."""
        model, streams, spec = _setup(tiny_config)
        before = model.conv(1).weight.data.copy()

        train_step(model, make_batch(streams.data, spec, 2), tiny_config.train, 0.05, streams.scd)

        assert not np.array_equal(model.conv(1).weight.data, before)
        assert np.all(model.conv(1).weight.grad == 0)


class TestFit:
    """Tests for fit on the tiny embedding."""

    def test_interval_records(self, tiny_config):
        """Test one record per interval and per epoch, with the epoch's learning rate."""
        model, streams, spec = _setup(tiny_config)
        seen: list[IntervalLosses] = []

        records = fit(model, tiny_config.train, streams, spec, intervals_per_epoch=3, on_interval=seen.append)

        assert steps_per_epoch(tiny_config.train) == 3
        assert len(records) == 6
        assert seen == records
        assert [r.last_in_epoch for r in records] == [False, False, True] * 2
        assert records[0].lr == 0.05
        assert records[-1].lr == pytest.approx(0.01)
        assert all(r.steps == 1 for r in records)

    def test_too_many_intervals(self, tiny_config):
        """Test that more intervals than steps per epoch is a configuration error."""
        model, streams, spec = _setup(tiny_config)

        with pytest.raises(ConfigError):
            fit(model, tiny_config.train, streams, spec, intervals_per_epoch=4)

    def test_same_seed_same_weights(self, tiny_config):
        """Test that two runs from the same seed end with identical weights."""
        first, second = _trained_state(tiny_config), _trained_state(tiny_config)

        for key in first:
            np.testing.assert_array_equal(first[key], second[key])

    def test_zero_beta_matches_control(self, tiny_config):
        """Test that beta = 0 trains bit-for-bit like SCD disabled."""
        zero_beta = _trained_state(tiny_config.updated(scd={"beta": 0.0}))
        control = _trained_state(tiny_config.updated(scd={"enabled": False, "layers": []}))

        for key in control:
            np.testing.assert_array_equal(zero_beta[key], control[key])

    def test_scd_changes_training(self, tiny_config):
        """Test that a tight margin with large beta moves the weights away from the control."""
        scd = _trained_state(tiny_config.updated(scd={"beta": 10.0, "epsilon": 0.0}))
        control = _trained_state(tiny_config.updated(scd={"enabled": False, "layers": []}))

        assert not np.array_equal(scd["0.weight"], control["0.weight"])

    def test_partial_last_batch(self, tiny_config):
        """Test that samples_per_epoch not divisible by batch_size still runs."""
        config = tiny_config.updated(train={"samples_per_epoch": 5, "epochs": 1})
        model, streams, spec = _setup(config)

        records = fit(model, config.train, streams, spec)

        assert records[0].steps == 3
        assert math.isfinite(records[0].combined_loss)

    @pytest.mark.slow
    def test_desk_epoch(self):
        """Test one desk-scale epoch with finite losses."""
        config = ExperimentConfig.desk().updated(train={"epochs": 1, "samples_per_epoch": 16})
        model, streams, spec = _setup(config)

        records = fit(model, config.train, streams, spec)

        assert math.isfinite(records[-1].task_loss)
        assert records[-1].scd_loss_mean >= 0.0

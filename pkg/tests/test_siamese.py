"""
Tests for the Siamese matcher: embedding, cross-correlation, labels and
the logistic task loss.
"""

import numpy as np
import pytest

from app.errors import ConfigError, ShapeError
from app.gradcheck import check_gradients
from app.layers import table1_preset
from app.siamese import (
    ScoreMap,
    SiameseModel,
    batch_labels,
    cross_correlate,
    embed,
    make_labels,
    score_center,
    task_loss,
)
from app.tensor import Graph, Tensor4, elementwise_mul, sum_all


class TestSiameseModel:
    """Tests for SiameseModel construction and state handling."""

    def test_parameters_cover_conv_and_bn(self, tiny_embedding, rng):
        """Test that parameters are conv weight/bias and bn gamma/beta."""
        model = SiameseModel(tiny_embedding, rng=rng)

        names = [param.name for param in model.parameters()]

        assert names == ["conv1.weight", "conv1.bias", "bn1.gamma", "bn1.beta", "conv2.weight", "conv2.bias"]

    def test_invalid_tap_rejected(self, tiny_embedding):
        """Test that taps must be conv indices of the embedding."""
        with pytest.raises(ConfigError):
            SiameseModel(tiny_embedding, scd_taps=(3,))

    def test_conv_lookup(self, tiny_embedding, rng):
        """Test 1-based conv lookup and its bounds."""
        model = SiameseModel(tiny_embedding, rng=rng)

        assert model.conv(2).name == "conv2"
        with pytest.raises(ConfigError):
            model.conv(3)

    def test_state_dict_round_trip(self, tiny_embedding, rng):
        """Test that loading a state dict reproduces the forward pass."""
        source = SiameseModel(tiny_embedding, rng=np.random.default_rng(1))
        target = SiameseModel(tiny_embedding, rng=np.random.default_rng(2))
        image = Tensor4.uniform((2, 3, 8, 8), rng)

        target.load_state_dict(source.state_dict())

        np.testing.assert_array_equal(
            embed(target, image, training=False)[0].data,
            embed(source, image, training=False)[0].data,
        )

    def test_state_dict_missing_key(self, tiny_embedding, rng):
        """Test that an incomplete state dict is rejected."""
        model = SiameseModel(tiny_embedding, rng=rng)
        state = model.state_dict()
        del state["1.running_var"]

        with pytest.raises(ConfigError):
            model.load_state_dict(state)

    def test_zero_grad(self, tiny_embedding, rng):
        """Test that zero_grad fills every parameter gradient with zeros."""
        model = SiameseModel(tiny_embedding, rng=rng)
        model.zero_grad()

        assert all(np.all(param.grad == 0) for param in model.parameters())


class TestEmbed:
    """Tests for embed."""

    def test_feature_and_tap_dims(self, tiny_embedding, rng):
        """Test final features and conv taps for a 12x12 search image."""
        model = SiameseModel(tiny_embedding, scd_taps=(1, 2), rng=rng)

        features, taps = embed(model, Tensor4.uniform((2, 3, 12, 12), rng))

        assert features.dims == (2, 4, 8, 8)
        assert taps[1].dims == (2, 4, 10, 10)
        assert taps[2] is features

    def test_explicit_taps_override_model_taps(self, tiny_embedding, rng):
        """Test that taps given to embed replace the model's SCD taps."""
        model = SiameseModel(tiny_embedding, scd_taps=(2,), rng=rng)

        _, taps = embed(model, Tensor4.uniform((1, 3, 8, 8), rng), taps=(1,))

        assert list(taps) == [1]

    def test_shared_weights(self, tiny_embedding, rng):
        """Test that both branches see the same weights."""
        model = SiameseModel(tiny_embedding, rng=rng)
        image = Tensor4.uniform((1, 3, 8, 8), rng)

        first = embed(model, image, training=False)[0].data
        second = embed(model, image, training=False)[0].data

        np.testing.assert_array_equal(first, second)

    def test_wrong_channel_count(self, tiny_embedding, rng):
        """Test that a grayscale image is rejected by an RGB embedding."""
        model = SiameseModel(tiny_embedding, rng=rng)

        with pytest.raises(ShapeError):
            embed(model, Tensor4.zeros((1, 1, 8, 8)))

    def test_image_too_small(self, tiny_embedding, rng):
        """Test that an image the stack cannot fit is a shape error."""
        model = SiameseModel(tiny_embedding, rng=rng)

        with pytest.raises(ShapeError, match="conv2"):
            embed(model, Tensor4.zeros((1, 3, 4, 4)))

    @pytest.mark.slow
    def test_table1_score_map(self):
        """Test 17x17x32 exemplar and 49x49x32 search embeddings giving a 33x33 score."""
        model = SiameseModel(table1_preset(), rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)

        z, _ = embed(model, Tensor4.uniform((1, 3, 127, 127), rng), training=False)
        x, _ = embed(model, Tensor4.uniform((1, 3, 255, 255), rng), training=False)

        assert z.dims == (1, 32, 17, 17)
        assert x.dims == (1, 32, 49, 49)
        assert model.score(z, x).grid_dims == (33, 33)


class TestCrossCorrelate:
    """Tests for cross_correlate."""

    def test_delta_kernel_copies_search(self, rng):
        """Test that a 1x1 unit exemplar returns the search map."""
        x = Tensor4.uniform((1, 1, 4, 5), rng)

        score = cross_correlate(Tensor4.ones((1, 1, 1, 1)), x)

        np.testing.assert_array_equal(score.score.data, x.data)

    def test_sums_over_channels(self, rng):
        """Test that channel contributions add up."""
        z = Tensor4.ones((1, 2, 1, 1))
        x = Tensor4.uniform((1, 2, 3, 3), rng)

        score = cross_correlate(z, x).score.data[0, 0]

        np.testing.assert_allclose(score, x.data[0, 0] + x.data[0, 1])

    def test_self_match_peaks_at_offset(self, rng):
        """Test that an exemplar pasted into an empty search peaks where it was pasted."""
        z = rng.normal(size=(1, 3, 3, 3))
        x = np.zeros((1, 3, 8, 9))
        x[:, :, 2:5, 3:6] = z

        score = cross_correlate(Tensor4(z), Tensor4(x)).score.data[0, 0]

        assert np.unravel_index(score.argmax(), score.shape) == (2, 3)
        assert score[2, 3] == pytest.approx(float((z * z).sum()))

    def test_output_dims(self, rng):
        """Test (n, 1, H-h+1, W-w+1) output dims."""
        score = cross_correlate(Tensor4.uniform((2, 4, 3, 3), rng), Tensor4.uniform((2, 4, 7, 6), rng))

        assert score.score.dims == (2, 1, 5, 4)
        assert score.grid_dims == (5, 4)

    @pytest.mark.parametrize(
        "z_dims,x_dims",
        [
            ((1, 2, 3, 3), (1, 3, 5, 5)),
            ((2, 2, 3, 3), (1, 2, 5, 5)),
            ((1, 2, 6, 3), (1, 2, 5, 5)),
        ],
    )
    def test_mismatches_rejected(self, z_dims, x_dims):
        """Test channel, batch and size mismatches."""
        with pytest.raises(ShapeError):
            cross_correlate(Tensor4.zeros(z_dims), Tensor4.zeros(x_dims))

    def test_gradients(self, rng):
        """Test exemplar and search gradients against finite differences."""
        z = Tensor4(rng.normal(size=(2, 2, 2, 3)), requires_grad=True)
        x = Tensor4(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        weights = Tensor4(rng.normal(size=(2, 1, 4, 3)))

        error = check_gradients(lambda: sum_all(elementwise_mul(cross_correlate(z, x).score, weights)), [z, x])

        assert error < 1e-6

    def test_model_score_is_scaled(self, tiny_embedding, rng):
        """Test that SiameseModel.score multiplies the raw correlation by score_scale."""
        model = SiameseModel(tiny_embedding, rng=rng, score_scale=0.01)
        z = Tensor4.uniform((1, 2, 2, 2), rng)
        x = Tensor4.uniform((1, 2, 4, 4), rng)

        np.testing.assert_allclose(model.score(z, x).score.data, 0.01 * cross_correlate(z, x).score.data)


class TestLabels:
    """Tests for make_labels, batch_labels and score_center."""

    def test_radius_two_on_17x17(self):
        """Test 13 positive pixels around the center with half the weight each side."""
        labels, weights = make_labels((17, 17), (8, 8), 2.0)

        positive = labels == 1.0
        assert positive.sum() == 13
        assert weights[positive].sum() == pytest.approx(0.5)
        assert weights[~positive].sum() == pytest.approx(0.5)
        assert weights.sum() == pytest.approx(1.0)

    def test_zero_radius_single_positive(self):
        """Test that radius 0 marks only the center."""
        labels, _ = make_labels((5, 5), (0, 4), 0.0)

        assert np.argwhere(labels == 1.0).tolist() == [[0, 4]]

    def test_center_outside_grid(self):
        """Test that a center off the grid is a shape error."""
        with pytest.raises(ShapeError):
            make_labels((5, 5), (5, 0), 1.0)

    def test_negative_radius(self):
        """Test that a negative radius is rejected."""
        with pytest.raises(ValueError):
            make_labels((5, 5), (2, 2), -1.0)

    def test_radius_covering_everything(self):
        """Test that a grid without negatives is a configuration error."""
        with pytest.raises(ConfigError):
            make_labels((3, 3), (1, 1), 5.0)

    def test_batch_labels_stack(self):
        """Test that batch_labels stacks one grid per center."""
        labels, weights = batch_labels((5, 5), np.array([[1, 1], [3, 2]]), 1.0)

        assert labels.shape == weights.shape == (2, 5, 5)
        assert labels[1, 3, 2] == 1.0

    def test_score_center(self, tiny_embedding):
        """Test that the search-image center maps to the score-map center."""
        assert score_center((6.0, 6.0), tiny_embedding, (5, 5)) == (2, 2)
        assert score_center((100.0, -20.0), tiny_embedding, (5, 5)) == (4, 0)


class TestTaskLoss:
    """Tests for task_loss."""

    def _score_map(self, values: np.ndarray, center=(2, 2)) -> ScoreMap:
        labels, weights = make_labels(values.shape[2:], center, 1.0)
        n = values.shape[0]
        return ScoreMap(Tensor4(values, requires_grad=True)).with_labels(
            np.repeat(labels[None], n, axis=0), np.repeat(weights[None], n, axis=0)
        )

    def test_zero_scores_give_log_two(self):
        """Test that an all-zero score map costs log 2."""
        assert task_loss(self._score_map(np.zeros((2, 1, 5, 5)))).item() == pytest.approx(np.log(2.0))

    def test_perfect_scores_cost_little(self):
        """Test that large scores matching the labels drive the loss toward 0."""
        labels, _ = make_labels((5, 5), (2, 2), 1.0)

        loss = task_loss(self._score_map(20.0 * labels[None, None])).item()

        assert loss < 1e-8

    def test_gradient_step_descends(self, rng):
        """Test that a small step against the gradient lowers the loss."""
        score = self._score_map(rng.normal(size=(2, 1, 5, 5)))
        with Graph() as graph:
            before = task_loss(score)
        graph.backward(before)
        score.score.data -= 0.1 * score.score.grad

        assert task_loss(score).item() < before.item()

    def test_requires_labels(self):
        """Test that an unlabeled score map is rejected."""
        with pytest.raises(ConfigError):
            task_loss(ScoreMap(Tensor4.zeros((1, 1, 3, 3))))

    def test_label_shape_checked(self):
        """Test that labels must match the score grid."""
        with pytest.raises(ShapeError):
            ScoreMap(Tensor4.zeros((1, 1, 3, 3))).with_labels(np.ones((1, 4, 4)), np.ones((1, 4, 4)))

    def test_gradients(self, rng):
        """Test task_loss gradients against finite differences."""
        score = self._score_map(rng.normal(size=(2, 1, 5, 5)), center=(1, 3))

        assert check_gradients(lambda: task_loss(score), [score.score]) < 1e-6

"""
Fully-convolutional Siamese matcher.

Exemplar and search images pass through one shared embedding; the
exemplar embedding is slid over the search embedding (cross-correlation)
to produce a score map, supervised with a class-balanced logistic loss.
"""

import logging
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from app.errors import ConfigError, ShapeError
from app.layers import ConvLayer, EmbeddingConfig, Layer, build_layers, infer_shapes
from app.tensor import Tensor4, elementwise_mul, record_op, scale, softplus, sum_all

logger = logging.getLogger(__name__)


@dataclass
class ScoreMap:
    """Score grid per sample, plus the supervision attached to it."""
    score: Tensor4  # (n, 1, h, w)
    labels: np.ndarray | None = None  # (n, h, w), entries +1 / -1
    weights: np.ndarray | None = None  # (n, h, w), >= 0, summing to 1 per sample

    @property
    def grid_dims(self) -> tuple[int, int]:
        return self.score.h, self.score.w

    def with_labels(self, labels: np.ndarray, weights: np.ndarray) -> "ScoreMap":
        expected = (self.score.n, *self.grid_dims)
        if labels.shape != expected or weights.shape != expected:
            raise ShapeError(f"labels {labels.shape} / weights {weights.shape} do not match score grid {expected}")
        return replace(self, labels=labels, weights=weights)


class SiameseModel:
    """
    Shared embedding for both branches.

    Both branches call the very same layer objects, so weight sharing is
    exact rather than kept in sync by copying.
    """

    def __init__(
        self,
        embedding: EmbeddingConfig,
        scd_taps: Iterable[int] = (),
        rng: np.random.Generator | None = None,
        score_scale: float = 1e-3,
    ):
        self.embedding = embedding
        self.layers: list[Layer] = build_layers(embedding, rng if rng is not None else np.random.default_rng(0))
        self.scd_taps = tuple(sorted(set(scd_taps)))
        self.score_scale = score_scale
        for tap in self.scd_taps:
            if not 1 <= tap <= embedding.conv_count:
                raise ConfigError(f"tap layer {tap} is not a conv index of '{embedding.name}'")

    def parameters(self) -> list[Tensor4]:
        return [param for layer in self.layers for param in layer.parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics keyed '<layer position>.<name>'."""
        return {
            f"{position}.{name}": value
            for position, layer in enumerate(self.layers)
            for name, value in layer.state().items()
        }

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for position, layer in enumerate(self.layers):
            prefix = f"{position}."
            entries = {key[len(prefix):]: value for key, value in state.items() if key.startswith(prefix)}
            expected = set(layer.state())
            if set(entries) != expected:
                raise ConfigError(f"{layer.name}: checkpoint has {sorted(entries)}, expected {sorted(expected)}")
            layer.load_state(entries)

    def conv(self, index: int) -> ConvLayer:
        """The index-th conv layer (1-based)."""
        convs = [layer for layer in self.layers if isinstance(layer, ConvLayer)]
        if not 1 <= index <= len(convs):
            raise ConfigError(f"conv{index} does not exist; the embedding has {len(convs)} conv layers")
        return convs[index - 1]

    def score(self, exemplar_feat: Tensor4, search_feat: Tensor4) -> ScoreMap:
        """Scaled cross-correlation score map."""
        raw = cross_correlate(exemplar_feat, search_feat)
        return replace(raw, score=scale(raw.score, self.score_scale))


def embed(
    model: SiameseModel,
    image: Tensor4,
    training: bool = True,
    taps: Iterable[int] | None = None,
) -> tuple[Tensor4, dict[int, Tensor4]]:
    """
    Run one branch of the embedding.

    Args:
        model: Siamese model
        image: Input images of dims (n, C_in, h, w)
        training: Batch norm mode
        taps: Conv indices whose outputs (before batch norm) are returned;
            defaults to the model's SCD taps

    Returns:
        (final features, {conv index: conv output})
    """
    if image.c != model.embedding.in_channels:
        raise ShapeError(f"embedding expects {model.embedding.in_channels} input channels, got {image.c}")
    infer_shapes(model.embedding, (image.h, image.w))

    wanted = set(model.scd_taps if taps is None else taps)
    tapped: dict[int, Tensor4] = {}
    features = image
    conv_index = 0
    for layer in model.layers:
        features = layer(features, training)
        if isinstance(layer, ConvLayer):
            conv_index += 1
            if conv_index in wanted:
                tapped[conv_index] = features
    missing = wanted - set(tapped)
    if missing:
        raise ConfigError(f"tap layers {sorted(missing)} are not conv indices of '{model.embedding.name}'")
    return features, tapped


def cross_correlate(exemplar_feat: Tensor4, search_feat: Tensor4) -> ScoreMap:
    """
    Slide the exemplar embedding over the search embedding, per sample.

    out[y, x] = sum over c, i, j of exemplar[c, i, j] * search[c, y + i, x + j]
    """
    z, x = exemplar_feat, search_feat
    if z.c != x.c:
        raise ShapeError(f"cross_correlate: channel mismatch {z.c} vs {x.c}")
    if z.n != x.n:
        raise ShapeError(f"cross_correlate: batch mismatch {z.n} vs {x.n}")
    if z.h > x.h or z.w > x.w:
        raise ShapeError(f"cross_correlate: exemplar {z.h}x{z.w} is larger than search {x.h}x{x.w}")

    out_h, out_w = x.h - z.h + 1, x.w - z.w + 1
    out = np.zeros((x.n, out_h, out_w))
    for i in range(z.h):
        for j in range(z.w):
            out += np.einsum("nc,nchw->nhw", z.data[:, :, i, j], x.data[:, :, i : i + out_h, j : j + out_w])

    def rule(g: np.ndarray):
        g = g[:, 0]
        d_z = np.zeros_like(z.data) if z.requires_grad else None
        d_x = np.zeros_like(x.data) if x.requires_grad else None
        for i in range(z.h):
            for j in range(z.w):
                window = x.data[:, :, i : i + out_h, j : j + out_w]
                if d_z is not None:
                    d_z[:, :, i, j] = np.einsum("nhw,nchw->nc", g, window)
                if d_x is not None:
                    d_x[:, :, i : i + out_h, j : j + out_w] += z.data[:, :, i, j, None, None] * g[:, None]
        return d_z, d_x

    score = record_op("cross_correlate", out[:, None], (z, x), rule)
    return ScoreMap(score=score)


def make_labels(
    score_dims: tuple[int, int],
    center: tuple[int, int],
    radius_pos: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Disk labels around the target position with class-balanced weights.

    Args:
        score_dims: (rows, cols) of the score map
        center: (row, col) of the target in score-map pixels
        radius_pos: Pixels within this Euclidean distance are positive

    Returns:
        (labels of +1/-1, weights summing to 1 with each class holding half)
    """
    h, w = score_dims
    cy, cx = center
    if not (0 <= cy < h and 0 <= cx < w):
        raise ShapeError(f"label center {center} lies outside the {h}x{w} score map")
    if radius_pos < 0:
        raise ValueError(f"radius_pos must be >= 0, got {radius_pos}")

    rows, cols = np.mgrid[0:h, 0:w]
    positive = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius_pos**2
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_neg == 0:
        raise ConfigError(f"radius {radius_pos} covers the whole {h}x{w} score map: no negative pixels")

    labels = np.where(positive, 1.0, -1.0)
    weights = np.where(positive, 0.5 / n_pos, 0.5 / n_neg)
    return labels, weights


def batch_labels(
    score_dims: tuple[int, int],
    centers: np.ndarray,
    radius_pos: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack make_labels over a batch of (row, col) centers."""
    grids = [make_labels(score_dims, (int(cy), int(cx)), radius_pos) for cy, cx in centers]
    return np.stack([g[0] for g in grids]), np.stack([g[1] for g in grids])


def score_center(
    search_center: tuple[float, float],
    embedding: EmbeddingConfig,
    score_dims: tuple[int, int],
) -> tuple[int, int]:
    """
    Map a target center in search-image pixels to score-map pixels.

    Score pixel (y, x) compares the exemplar with the search window whose
    top-left corner sits at (y, x) * total_stride.
    """
    half = embedding.exemplar_size // 2
    stride = embedding.total_stride
    cy = int(round((search_center[0] - half) / stride))
    cx = int(round((search_center[1] - half) / stride))
    return min(max(cy, 0), score_dims[0] - 1), min(max(cx, 0), score_dims[1] - 1)


def task_loss(score: ScoreMap) -> Tensor4:
    """
    Weighted logistic loss, averaged over the batch.

    Per sample: sum over pixels of weight * log(1 + exp(-label * score)).
    """
    if score.labels is None or score.weights is None:
        raise ConfigError("task_loss needs a score map with labels and weights")
    totals = score.weights.sum(axis=(1, 2), keepdims=True)
    if np.any(totals <= 0):
        raise ConfigError("every sample needs positive total label weight")

    n = score.score.n
    signs = Tensor4(-score.labels[:, None])
    weights = Tensor4((score.weights / totals)[:, None])
    per_pixel = softplus(elementwise_mul(score.score, signs))
    return scale(sum_all(elementwise_mul(per_pixel, weights)), 1.0 / n)

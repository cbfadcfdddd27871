"""
Stochastic channel decorrelation.

Channel pairs of a conv layer's output are compared with normalized
cross correlation (NCC); a squared max-margin loss penalizes |NCC|
above a margin. Each iteration only a random subset of at most M
unordered pairs is evaluated, and per-layer losses are combined with
the task loss as alpha * task + beta * mean(per-layer losses).
"""

import logging
from dataclasses import dataclass, field
from math import comb

import numpy as np

from app.config import ScdConfig
from app.errors import ConfigError, ShapeError
from app.tensor import (
    Tensor4,
    absolute,
    add,
    divide,
    elementwise_mul,
    mean_all,
    record_op,
    relu,
    scale,
    sqrt,
    subtract,
    sum_all,
)

logger = logging.getLogger(__name__)


@dataclass
class PairSample:
    """Selected channel pairs; each row is (m, n) with m < n, 0-based."""
    pairs: np.ndarray
    channels: int

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def first(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def second(self) -> np.ndarray:
        return self.pairs[:, 1]

    def as_tuples(self) -> list[tuple[int, int]]:
        return [(int(m), int(n)) for m, n in self.pairs]


@dataclass
class LossBreakdown:
    """Task loss, per-layer SCD losses and their weighted combination (scalar tensors)."""
    task_loss: Tensor4
    scd_per_layer: dict[int, Tensor4] = field(default_factory=dict)
    combined: Tensor4 | None = None

    @property
    def scd_mean(self) -> float:
        if not self.scd_per_layer:
            return 0.0
        return float(np.mean([loss.item() for loss in self.scd_per_layer.values()]))

    def as_floats(self) -> dict[str, float]:
        return {
            "task_loss": self.task_loss.item(),
            "scd_loss_mean": self.scd_mean,
            "combined_loss": self.combined.item(),
            **{f"scd_l{layer}": loss.item() for layer, loss in sorted(self.scd_per_layer.items())},
        }


def _check_channel_map(t: Tensor4, label: str) -> None:
    if t.n != 1 or t.c != 1:
        raise ShapeError(f"ncc: {label} must be a single channel of one sample, got dims {t.dims}")


def ncc(o_m: Tensor4, o_n: Tensor4, delta: float = 1e-8) -> Tensor4:
    """
    Normalized cross correlation of two channel maps.

    p = sum(o_m * o_n) / (sqrt(sum(o_m^2) * sum(o_n^2)) + delta)

    Args:
        o_m: Channel map of dims (1, 1, h, w)
        o_n: Channel map of the same dims
        delta: Stabilizer added outside the square root

    Returns:
        Scalar tensor p in [-1, 1] (exactly when delta is 0)
    """
    _check_channel_map(o_m, "o_m")
    _check_channel_map(o_n, "o_n")
    if o_m.dims != o_n.dims:
        raise ShapeError(f"ncc: shape mismatch {o_m.dims} vs {o_n.dims}")

    numerator = sum_all(elementwise_mul(o_m, o_n))
    energy = elementwise_mul(sum_all(elementwise_mul(o_m, o_m)), sum_all(elementwise_mul(o_n, o_n)))
    denominator = add(sqrt(energy), Tensor4.scalar(delta))
    return divide(numerator, denominator)


def pairwise_ncc(features: Tensor4, pairs: PairSample, delta: float) -> Tensor4:
    """
    NCC of every selected pair, for every batch sample, in one operation.

    Args:
        features: Layer output of dims (n, C, h, w)
        pairs: Channel pairs to compare
        delta: Stabilizer added outside the square root

    Returns:
        Tensor of dims (n, P, 1, 1) with p[b, k] for pair k of sample b
    """
    if pairs.channels != features.c:
        raise ShapeError(f"pair sample drawn for {pairs.channels} channels, features have {features.c}")
    n, c = features.n, features.c
    flat = features.data.reshape(n, c, -1)
    norms = np.sqrt((flat * flat).sum(axis=-1))
    first, second = pairs.first, pairs.second

    a, b = flat[:, first], flat[:, second]
    numerator = (a * b).sum(axis=-1)
    norm_a, norm_b = norms[:, first], norms[:, second]
    denominator = norm_a * norm_b + delta
    p = numerator / denominator

    def rule(g: np.ndarray):
        g = g.reshape(n, -1)
        # d(den)/da = norm_b * a / norm_a; zero when a is an all-zero channel.
        ratio_a = np.divide(norm_b, norm_a, out=np.zeros_like(norm_a), where=norm_a > 0)
        ratio_b = np.divide(norm_a, norm_b, out=np.zeros_like(norm_b), where=norm_b > 0)
        coeff = numerator / (denominator * denominator)
        grad_a = (g / denominator)[..., None] * b - (g * coeff * ratio_a)[..., None] * a
        grad_b = (g / denominator)[..., None] * a - (g * coeff * ratio_b)[..., None] * b
        grad = np.zeros_like(flat)
        np.add.at(grad, (slice(None), first), grad_a)
        np.add.at(grad, (slice(None), second), grad_b)
        return (grad.reshape(features.dims),)

    return record_op("pairwise_ncc", p.reshape(n, len(pairs), 1, 1), (features,), rule)


def pair_margin_loss(p: Tensor4, epsilon: float) -> Tensor4:
    """
    Squared max-margin loss max(0, |p| - epsilon)^2, elementwise.

    Zero, with zero gradient, whenever |p| <= epsilon.
    """
    if epsilon < 0:
        raise ValueError(f"margin must be >= 0, got {epsilon}")
    excess = relu(subtract(absolute(p), Tensor4.full(p.dims, epsilon)))
    return elementwise_mul(excess, excess)


def pair_universe_size(channels: int) -> int:
    return comb(channels, 2)


def sample_pairs(channels: int, budget: int, rng: np.random.Generator) -> PairSample:
    """
    Draw min(budget, C(C-1)/2) distinct unordered channel pairs uniformly.

    When the budget covers the whole universe every pair is returned and
    the generator is not consumed.

    Args:
        channels: Channel count C of the layer
        budget: Maximum number of pairs M
        rng: Seeded generator

    Returns:
        PairSample with pairs sorted by (m, n)
    """
    if channels < 2:
        raise ShapeError(f"sample_pairs needs at least 2 channels, got {channels}")
    if budget < 1:
        raise ValueError(f"pair budget must be >= 1, got {budget}")
    first, second = np.triu_indices(channels, k=1)
    universe = len(first)
    if budget >= universe:
        chosen = np.arange(universe)
    else:
        chosen = np.sort(rng.choice(universe, size=budget, replace=False))
    return PairSample(np.stack([first[chosen], second[chosen]], axis=1), channels)


def layer_scd_loss(
    features: Tensor4,
    cfg: ScdConfig,
    rng: np.random.Generator,
    epsilon: float | None = None,
) -> Tensor4:
    """
    SCD loss of one layer for this iteration.

    One pair sample is shared by the whole mini-batch; the margin loss is
    applied to each sample's NCC and averaged over samples and pairs.

    Args:
        features: Conv output (before batch norm) of dims (n, C, h, w)
        cfg: SCD settings (pair budget, margin, stabilizer)
        rng: Generator stream for this layer
        epsilon: Margin override, e.g. a per-layer margin

    Returns:
        Scalar loss tensor
    """
    if features.c < 2:
        raise ShapeError(f"layer_scd_loss needs at least 2 channels, got {features.c}")
    margin = cfg.epsilon if epsilon is None else epsilon
    pairs = sample_pairs(features.c, cfg.pair_budget, rng)
    p = pairwise_ncc(features, pairs, cfg.denom_stabilizer)
    logger.debug(f"SCD on {features.c} channels: {len(pairs)} pairs, margin {margin}")
    return mean_all(pair_margin_loss(p, margin))


def combined_loss(
    task: Tensor4 | float,
    per_layer: dict[int, Tensor4 | float],
    cfg: ScdConfig,
) -> LossBreakdown:
    """
    Combine the task loss with the per-layer SCD losses.

    combined = alpha * task + beta * mean(per_layer)   when SCD is enabled
    combined = alpha * task                             otherwise

    Args:
        task: Task loss
        per_layer: SCD loss per decorrelated conv layer; keys must equal cfg.layers
        cfg: SCD settings providing alpha, beta and the layer set

    Returns:
        LossBreakdown whose combined entry can be back-propagated
    """
    task = task if isinstance(task, Tensor4) else Tensor4.scalar(task)
    per_layer = {
        layer: loss if isinstance(loss, Tensor4) else Tensor4.scalar(loss) for layer, loss in per_layer.items()
    }
    weighted_task = scale(task, cfg.alpha)

    if not cfg.enabled:
        if per_layer:
            raise ConfigError(f"SCD is disabled but losses were given for layers {sorted(per_layer)}")
        return LossBreakdown(task_loss=task, scd_per_layer={}, combined=weighted_task)

    if set(per_layer) != set(cfg.layers):
        raise ConfigError(f"SCD losses given for layers {sorted(per_layer)}, configured layers are {list(cfg.layers)}")

    ordered = [per_layer[layer] for layer in cfg.layers]
    total = ordered[0]
    for loss in ordered[1:]:
        total = add(total, loss)
    regularizer = scale(total, cfg.beta / len(ordered))
    return LossBreakdown(task_loss=task, scd_per_layer=per_layer, combined=add(weighted_task, regularizer))

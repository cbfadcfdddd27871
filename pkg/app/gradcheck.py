"""
Finite-difference gradient checks for every differentiable operation.

Each case builds a scalar loss from fresh random inputs; the analytic
gradient from one backward pass is compared with central differences
computed one element at a time. Non-scalar operations are reduced with
a fixed random projection so every output element contributes.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from app.config import ScdConfig, get_settings
from app.layers import BatchNormLayer, ConvLayer, batchnorm_forward, conv_forward, maxpool_forward
from app.scd import layer_scd_loss, ncc, pair_margin_loss
from app.siamese import ScoreMap, cross_correlate, make_labels, task_loss
from app.tensor import (
    Graph,
    Tensor4,
    absolute,
    divide,
    elementwise_mul,
    relu,
    softplus,
    sqrt,
    sum_all,
)

logger = logging.getLogger(__name__)

LossFn = Callable[[], Tensor4]
CaseBuilder = Callable[[np.random.Generator], tuple[LossFn, list[Tensor4]]]


@dataclass
class GradcheckResult:
    op: str
    worst_error: float
    seeds: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst_error)) and self.worst_error < self.tolerance


def numerical_gradient(loss_fn: LossFn, tensor: Tensor4, step: float = 1e-5) -> np.ndarray:
    """Central differences of loss_fn with respect to every element of tensor."""
    grad = np.zeros_like(tensor.data)
    for index in np.ndindex(tensor.data.shape):
        original = tensor.data[index]
        tensor.data[index] = original + step
        plus = loss_fn().item()
        tensor.data[index] = original - step
        minus = loss_fn().item()
        tensor.data[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


def analytic_gradients(loss_fn: LossFn, tensors: list[Tensor4]) -> list[np.ndarray]:
    for tensor in tensors:
        tensor.grad = None
    with Graph() as graph:
        loss = loss_fn()
        graph.backward(loss)
    return [tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data) for tensor in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(loss_fn: LossFn, tensors: list[Tensor4], step: float = 1e-5) -> float:
    """Worst relative error over the given input tensors."""
    analytic = analytic_gradients(loss_fn, tensors)
    return max(
        relative_error(grad, numerical_gradient(loss_fn, tensor, step)) for grad, tensor in zip(analytic, tensors)
    )


def _leaf(data: np.ndarray, name: str) -> Tensor4:
    return Tensor4(data, requires_grad=True, name=name)


def _project(out: Tensor4, weights: np.ndarray) -> Tensor4:
    return sum_all(elementwise_mul(out, Tensor4(weights)))


def _away_from(values: np.ndarray, points: tuple[float, ...], gap: float) -> np.ndarray:
    """Push values out of [p - gap, p + gap] around each kink point."""
    values = values.copy()
    for point in points:
        close = np.abs(values - point) < gap
        values[close] = point + np.where(values[close] >= point, 2 * gap, -2 * gap)
    return values


def _elementwise_case(rng: np.random.Generator):
    a = _leaf(rng.uniform(0.5, 2.0, size=(2, 3, 3, 3)), "a")
    b = _leaf(_away_from(rng.normal(size=(2, 3, 3, 3)), (0.0,), 0.05), "b")
    weights = rng.normal(size=a.dims)

    def loss():
        mixed = divide(elementwise_mul(sqrt(a), relu(b)), a) + softplus(b) - absolute(b) * 0.5
        return _project(mixed, weights)

    return loss, [a, b]


def _conv_case(rng: np.random.Generator):
    layer = ConvLayer(3, 4, 3, stride=2, rng=rng, name="conv")
    x = _leaf(rng.normal(size=(2, 3, 7, 7)), "x")
    layer.bias.data[...] = rng.normal(size=layer.bias.dims)
    weights = rng.normal(size=(2, 4, 3, 3))
    return (lambda: _project(conv_forward(layer, x), weights)), [x, layer.weight, layer.bias]


def _maxpool_case(rng: np.random.Generator):
    # Distinct values 0.01 apart keep every window's argmax stable under the probe step.
    dims = (2, 2, 5, 5)
    values = rng.permutation(int(np.prod(dims))).astype(float) * 0.01
    x = _leaf(values.reshape(dims), "x")
    weights = rng.normal(size=(2, 2, 2, 2))
    return (lambda: _project(maxpool_forward(x, 3, 2), weights)), [x]


def _batchnorm_case(rng: np.random.Generator, training: bool):
    layer = BatchNormLayer(3, name="bn")
    layer.gamma.data[...] = rng.uniform(0.5, 1.5, size=layer.gamma.dims)
    layer.beta.data[...] = rng.normal(size=layer.beta.dims)
    layer.running_mean = rng.normal(size=3)
    layer.running_var = rng.uniform(0.5, 2.0, size=3)
    x = _leaf(rng.normal(size=(2, 3, 4, 4)), "x")
    weights = rng.normal(size=x.dims)
    return (lambda: _project(batchnorm_forward(layer, x, training), weights)), [x, layer.gamma, layer.beta]


def _cross_correlate_case(rng: np.random.Generator):
    z = _leaf(rng.normal(size=(2, 3, 3, 3)), "exemplar")
    x = _leaf(rng.normal(size=(2, 3, 6, 6)), "search")
    weights = rng.normal(size=(2, 1, 4, 4))
    return (lambda: _project(cross_correlate(z, x).score, weights)), [z, x]


def _ncc_case(rng: np.random.Generator):
    o_m = _leaf(rng.normal(size=(1, 1, 4, 4)), "o_m")
    o_n = _leaf(rng.normal(size=(1, 1, 4, 4)), "o_n")
    return (lambda: ncc(o_m, o_n)), [o_m, o_n]


def _pair_margin_case(rng: np.random.Generator):
    epsilon = 0.3
    magnitudes = _away_from(rng.uniform(0.0, 1.0, size=8), (0.0, epsilon), 0.02)
    p = _leaf((magnitudes * rng.choice([-1.0, 1.0], size=8)).reshape(1, 8, 1, 1), "p")
    weights = rng.uniform(0.5, 1.5, size=p.dims)
    return (lambda: _project(pair_margin_loss(p, epsilon), weights)), [p]


def _layer_scd_case(rng: np.random.Generator):
    cfg = ScdConfig(epsilon=0.2, pair_budget=5, layers=(1,))
    # A shared component correlates the channels so some pairs exceed the margin.
    shared = rng.normal(size=(2, 1, 5, 5))
    features = _leaf(rng.normal(size=(2, 5, 5, 5)) + rng.uniform(0.5, 1.5, size=(1, 5, 1, 1)) * shared, "features")
    seed = int(rng.integers(2**31))
    return (lambda: layer_scd_loss(features, cfg, np.random.default_rng(seed))), [features]


def _task_loss_case(rng: np.random.Generator):
    score = _leaf(rng.normal(size=(2, 1, 5, 5)), "score")
    grids = [make_labels((5, 5), tuple(int(v) for v in rng.integers(0, 5, size=2)), 1.0) for _ in range(2)]
    labels = np.stack([g[0] for g in grids])
    weights = np.stack([g[1] for g in grids])
    return (lambda: task_loss(ScoreMap(score, labels, weights))), [score]


CASES: dict[str, CaseBuilder] = {
    "elementwise": _elementwise_case,
    "conv": _conv_case,
    "maxpool": _maxpool_case,
    "batchnorm_train": lambda rng: _batchnorm_case(rng, training=True),
    "batchnorm_eval": lambda rng: _batchnorm_case(rng, training=False),
    "cross_correlate": _cross_correlate_case,
    "ncc": _ncc_case,
    "pair_margin_loss": _pair_margin_case,
    "layer_scd_loss": _layer_scd_case,
    "task_loss": _task_loss_case,
}


def run_suite(
    seeds: int | None = None,
    tolerance: float | None = None,
    step: float | None = None,
    ops: list[str] | None = None,
) -> list[GradcheckResult]:
    """
    Check every registered operation on several random seeds.

    Defaults come from Settings (gradcheck_seeds, gradcheck_tolerance,
    finite_difference_step).

    Returns:
        One result per operation carrying its worst relative error
    """
    settings = get_settings()
    seeds = seeds if seeds is not None else settings.gradcheck_seeds
    tolerance = tolerance if tolerance is not None else settings.gradcheck_tolerance
    step = step if step is not None else settings.finite_difference_step

    results = []
    for op in ops or list(CASES):
        worst = 0.0
        for seed in range(seeds):
            loss_fn, tensors = CASES[op](np.random.default_rng(seed))
            worst = max(worst, check_gradients(loss_fn, tensors, step))
        result = GradcheckResult(op=op, worst_error=worst, seeds=seeds, tolerance=tolerance)
        logger.debug(f"gradcheck {op}: worst relative error {worst:.3e} over {seeds} seeds")
        results.append(result)
    return results

"""
Correlation diagnostics and metric export.

Unlike training, diagnostics evaluate every channel pair of a layer,
with batch norm in evaluation mode, and average the per-sample NCC
matrices over a held-out batch.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from app.errors import ConfigError, ShapeError
from app.siamese import SiameseModel, embed
from app.tensor import Tensor4

logger = logging.getLogger(__name__)


@dataclass
class LayerCorrelation:
    """Exhaustive pairwise NCC of one conv layer plus off-diagonal summaries."""
    layer: int
    matrix: np.ndarray
    mean_abs: float
    max_abs: float
    frac_over: float
    mean_excess: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "channels": int(self.matrix.shape[0]),
            "mean_abs_p": self.mean_abs,
            "max_abs_p": self.max_abs,
            "frac_over_epsilon": self.frac_over,
            "mean_excess": self.mean_excess,
            "matrix": self.matrix.tolist(),
        }


@dataclass
class CorrelationReport:
    epsilon: float
    layers: dict[int, LayerCorrelation] = field(default_factory=dict)
    epoch: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "epsilon": self.epsilon,
            "layers": {f"conv{index}": entry.to_dict() for index, entry in sorted(self.layers.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def summary_lines(self) -> list[str]:
        lines = [f"{'layer':<8}{'channels':>9}{'mean|p|':>10}{'max|p|':>10}{'frac>eps':>10}{'excess':>10}"]
        for index, entry in sorted(self.layers.items()):
            lines.append(
                f"{'conv' + str(index):<8}{entry.matrix.shape[0]:>9}{entry.mean_abs:>10.4f}"
                f"{entry.max_abs:>10.4f}{entry.frac_over:>10.4f}{entry.mean_excess:>10.4f}"
            )
        return lines


def correlation_matrix(features: np.ndarray, delta: float = 1e-8) -> np.ndarray:
    """
    Mean over samples of the C x C NCC matrix of each sample's channels.

    Args:
        features: Array of shape (n, C, h, w)
        delta: Stabilizer added to the norm product

    Returns:
        Symmetric (C, C) matrix
    """
    if features.ndim != 4:
        raise ShapeError(f"correlation_matrix needs (n, C, h, w) features, got shape {features.shape}")
    flat = features.reshape(features.shape[0], features.shape[1], -1)
    gram = np.einsum("nci,ndi->ncd", flat, flat)
    norms = np.sqrt(np.einsum("ncc->nc", gram))
    matrices = gram / (norms[:, :, None] * norms[:, None, :] + delta)
    matrix = matrices.mean(axis=0)
    return 0.5 * (matrix + matrix.T)


def summarize(layer: int, matrix: np.ndarray, epsilon: float) -> LayerCorrelation:
    """Off-diagonal statistics over the upper triangle of a correlation matrix."""
    rows, cols = np.triu_indices(matrix.shape[0], k=1)
    magnitudes = np.abs(matrix[rows, cols])
    if magnitudes.size == 0:
        raise ShapeError(f"conv{layer} has a single channel; no pairs to summarize")
    return LayerCorrelation(
        layer=layer,
        matrix=matrix,
        mean_abs=float(magnitudes.mean()),
        max_abs=float(magnitudes.max()),
        frac_over=float((magnitudes > epsilon).mean()),
        mean_excess=float(np.maximum(magnitudes - epsilon, 0.0).mean()),
    )


def full_correlation_report(
    model: SiameseModel,
    eval_batch: Tensor4,
    layers: Iterable[int],
    epsilon: float = 0.3,
    delta: float = 1e-8,
    epoch: int | None = None,
) -> CorrelationReport:
    """
    Evaluate every channel pair of the listed conv layers.

    Args:
        model: Model to inspect (batch norm runs in eval mode, nothing is recorded)
        eval_batch: Held-out images of dims (n, C_in, h, w)
        layers: 1-based conv indices
        epsilon: Margin used for the fraction and excess summaries
        delta: NCC stabilizer
        epoch: Epoch index stored in the report

    Returns:
        CorrelationReport keyed by conv index
    """
    layers = sorted(set(layers))
    invalid = [layer for layer in layers if not 1 <= layer <= model.embedding.conv_count]
    if invalid:
        raise ConfigError(
            f"conv layer(s) {invalid} do not exist; '{model.embedding.name}' has {model.embedding.conv_count}"
        )

    _, tapped = embed(model, eval_batch.detach(), training=False, taps=layers)
    report = CorrelationReport(epsilon=epsilon, epoch=epoch)
    for layer in layers:
        features = tapped[layer].data
        dead = int((np.abs(features).reshape(features.shape[0], features.shape[1], -1).max(axis=(0, 2)) == 0).sum())
        if dead:
            logger.warning(f"conv{layer}: {dead} channel(s) are all zero on the evaluation batch")
        report.layers[layer] = summarize(layer, correlation_matrix(features, delta), epsilon)
    return report


def metric_columns(layers: Iterable[int]) -> list[str]:
    columns = ["epoch", "lr", "task_loss", "scd_loss_mean", "combined_loss"]
    for layer in sorted(layers):
        columns += [f"meanAbsP_l{layer}", f"maxAbsP_l{layer}", f"fracOver_l{layer}"]
    return columns


class MetricsWriter:
    """Append-only metrics CSV with a fixed column set."""

    def __init__(self, path: str | Path, layers: Iterable[int]):
        self.path = Path(path)
        self.layers = sorted(layers)
        self.columns = metric_columns(self.layers)
        self.rows = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="", encoding="utf-8") as handle:
            csv.writer(handle, lineterminator="\n").writerow(self.columns)

    def write_row(
        self,
        epoch: int,
        lr: float,
        losses: dict[str, float],
        report: CorrelationReport,
    ) -> None:
        row = [str(epoch), repr(float(lr))]
        row += [repr(float(losses[key])) for key in ("task_loss", "scd_loss_mean", "combined_loss")]
        for layer in self.layers:
            entry = report.layers[layer]
            row += [repr(entry.mean_abs), repr(entry.max_abs), repr(entry.frac_over)]
        with self.path.open("a", newline="", encoding="utf-8") as handle:
            csv.writer(handle, lineterminator="\n").writerow(row)
        self.rows += 1


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))

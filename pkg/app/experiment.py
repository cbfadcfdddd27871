"""
Experiment runs shared by the CLI verbs.

A run trains one model from an ExperimentConfig and leaves behind:

    <dir>/config.json          resolved configuration
    <dir>/metrics.csv          one row per metrics interval
    <dir>/reports/epoch_NNN.json
    <dir>/checkpoint.json      final model (plus checkpoint_epoch_NNN.json when asked)

ab-compare and sweep run several arms that differ only in their SCD
settings, sharing the seed and therefore the data and initial weights.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from app.checkpoint import save_checkpoint
from app.config import ExperimentConfig, ScdConfig
from app.diagnostics import CorrelationReport, MetricsWriter, full_correlation_report
from app.errors import ConfigError
from app.siamese import SiameseModel
from app.trainer import IntervalLosses, PairSpec, RunStreams, fit, make_batch

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    config: ExperimentConfig
    directory: Path
    final_report: CorrelationReport
    final_losses: IntervalLosses
    metrics_path: Path
    checkpoint_path: Path
    intervals: list[IntervalLosses] = field(default_factory=list)


def report_layers(config: ExperimentConfig) -> tuple[int, ...]:
    """Layers tracked in metrics: the SCD layers, even for a control arm with SCD disabled."""
    return config.scd.layers or config.embedding_config.default_scd_layers or (config.embedding_config.conv_count,)


def run_experiment(
    config: ExperimentConfig,
    directory: str | Path | None = None,
    layers: Iterable[int] | None = None,
) -> RunResult:
    """
    Train one arm and write its artefacts.

    Args:
        config: Validated experiment configuration
        directory: Output directory override; defaults to the config's output directory
        layers: Conv indices tracked in metrics and reports; defaults to report_layers(config)

    Returns:
        RunResult with the final correlation report and losses
    """
    directory = Path(directory) if directory is not None else config.output.resolve_directory()
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(config.to_document(), sort_keys=True, indent=2), encoding="utf-8")

    embedding = config.embedding_config
    train = config.train
    layers = tuple(sorted(set(layers))) if layers is not None else report_layers(config)
    logger.info(f"Starting run in {directory}: {embedding.name}, SCD {config.scd.variant_tag}, seed {train.seed}")

    streams = RunStreams.from_seed(train.seed, embedding.conv_count)
    model = SiameseModel(embedding, scd_taps=layers, rng=streams.init, score_scale=train.score_scale)
    spec = PairSpec.from_config(embedding, train.data)
    eval_batch = make_batch(streams.eval, spec, train.eval_batch_size)
    writer = MetricsWriter(directory / "metrics.csv", layers)
    reports: list[CorrelationReport] = []

    def on_interval(record: IntervalLosses) -> None:
        report = full_correlation_report(
            model,
            eval_batch.search,
            layers,
            epsilon=config.scd.epsilon,
            delta=config.scd.denom_stabilizer,
            epoch=record.epoch,
        )
        losses = {
            "task_loss": record.task_loss,
            "scd_loss_mean": record.scd_loss_mean,
            "combined_loss": record.combined_loss,
        }
        writer.write_row(record.epoch, record.lr, losses, report)
        reports.append(report)
        if record.last_in_epoch:
            report.save(directory / "reports" / f"epoch_{record.epoch:03d}.json")
            if config.output.checkpoint_every_epoch:
                save_checkpoint(model, directory / f"checkpoint_epoch_{record.epoch:03d}.json", {"epoch": record.epoch})

    intervals = fit(model, train, streams, spec, config.output.metrics_per_epoch, on_interval)
    checkpoint_path = save_checkpoint(
        model,
        directory / "checkpoint.json",
        {"epoch": train.epochs - 1, "variant": config.scd.variant_tag, "seed": train.seed},
    )
    logger.info(f"Run finished: {writer.rows} metric rows in {writer.path}")
    return RunResult(
        config=config,
        directory=directory,
        final_report=reports[-1],
        final_losses=intervals[-1],
        metrics_path=writer.path,
        checkpoint_path=checkpoint_path,
        intervals=intervals,
    )


@dataclass
class LayerComparison:
    layer: int
    frac_over_scd: float
    frac_over_control: float
    mean_abs_scd: float
    mean_abs_control: float
    mean_excess_scd: float
    mean_excess_control: float

    @property
    def excess_reduction(self) -> float:
        """Relative drop in mean excess; 0 when the control has none."""
        if self.mean_excess_control <= 0.0:
            return 0.0
        return 1.0 - self.mean_excess_scd / self.mean_excess_control


@dataclass
class AbComparison:
    layers: list[LayerComparison]
    task_loss_scd: float
    task_loss_control: float
    # Acceptance thresholds
    min_excess_reduction: float = 0.5
    max_task_loss_ratio: float = 0.2

    @property
    def fraction_lower(self) -> bool:
        return all(entry.frac_over_scd < entry.frac_over_control for entry in self.layers)

    @property
    def excess_reduced(self) -> bool:
        return all(entry.excess_reduction >= self.min_excess_reduction for entry in self.layers)

    @property
    def task_loss_kept(self) -> bool:
        return abs(self.task_loss_scd - self.task_loss_control) <= self.max_task_loss_ratio * self.task_loss_control

    @property
    def passed(self) -> bool:
        return self.fraction_lower and self.excess_reduced and self.task_loss_kept

    def table_lines(self) -> list[str]:
        lines = [
            f"{'layer':<7}{'frac>eps scd':>14}{'control':>10}{'mean|p| scd':>13}{'control':>10}"
            f"{'excess scd':>12}{'control':>10}{'reduction':>11}"
        ]
        for entry in self.layers:
            lines.append(
                f"{'conv' + str(entry.layer):<7}{entry.frac_over_scd:>14.4f}{entry.frac_over_control:>10.4f}"
                f"{entry.mean_abs_scd:>13.4f}{entry.mean_abs_control:>10.4f}"
                f"{entry.mean_excess_scd:>12.4f}{entry.mean_excess_control:>10.4f}{entry.excess_reduction:>11.1%}"
            )
        lines.append(f"final task loss: scd {self.task_loss_scd:.4f}, control {self.task_loss_control:.4f}")
        lines.append(
            f"fraction lower: {self.fraction_lower}, excess reduced >= {self.min_excess_reduction:.0%}: "
            f"{self.excess_reduced}, task loss within {self.max_task_loss_ratio:.0%}: {self.task_loss_kept}"
        )
        return lines

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "fraction_lower": self.fraction_lower,
            "excess_reduced": self.excess_reduced,
            "task_loss_kept": self.task_loss_kept,
            "task_loss_scd": self.task_loss_scd,
            "task_loss_control": self.task_loss_control,
            "layers": [
                {
                    "layer": entry.layer,
                    "frac_over_scd": entry.frac_over_scd,
                    "frac_over_control": entry.frac_over_control,
                    "mean_abs_scd": entry.mean_abs_scd,
                    "mean_abs_control": entry.mean_abs_control,
                    "mean_excess_scd": entry.mean_excess_scd,
                    "mean_excess_control": entry.mean_excess_control,
                    "excess_reduction": entry.excess_reduction,
                }
                for entry in self.layers
            ],
        }


def compare_runs(scd_run: RunResult, control_run: RunResult) -> AbComparison:
    rows = []
    for layer, scd_entry in sorted(scd_run.final_report.layers.items()):
        control_entry = control_run.final_report.layers[layer]
        rows.append(
            LayerComparison(
                layer=layer,
                frac_over_scd=scd_entry.frac_over,
                frac_over_control=control_entry.frac_over,
                mean_abs_scd=scd_entry.mean_abs,
                mean_abs_control=control_entry.mean_abs,
                mean_excess_scd=scd_entry.mean_excess,
                mean_excess_control=control_entry.mean_excess,
            )
        )
    return AbComparison(
        layers=rows,
        task_loss_scd=scd_run.final_losses.task_loss,
        task_loss_control=control_run.final_losses.task_loss,
    )


def ab_arms(config: ExperimentConfig) -> tuple[ExperimentConfig, ExperimentConfig]:
    """SCD-enabled and SCD-disabled copies of one configuration."""
    scd_config = config if config.scd.enabled else config.with_scd(config.scd.model_copy(update={"enabled": True}))
    control = config.with_scd(config.scd.model_copy(update={"enabled": False}))
    return scd_config, control


def run_arms(
    configs: dict[str, ExperimentConfig],
    directory: Path,
    layers: Iterable[int] | None = None,
    parallel: bool = False,
) -> dict[str, RunResult]:
    """Run named arms into directory/<name>, optionally on worker threads."""
    if parallel and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=len(configs)) as pool:
            futures = {
                name: pool.submit(run_experiment, cfg, directory / name, layers) for name, cfg in configs.items()
            }
            return {name: future.result() for name, future in futures.items()}
    return {name: run_experiment(cfg, directory / name, layers) for name, cfg in configs.items()}


def ab_compare(
    config: ExperimentConfig,
    directory: str | Path | None = None,
    parallel: bool = False,
) -> AbComparison:
    """
    Train the SCD arm and the control arm and compare their final statistics.

    Writes ab_compare.json next to the two run directories.
    """
    directory = Path(directory) if directory is not None else config.output.resolve_directory()
    scd_config, control = ab_arms(config)
    runs = run_arms({"scd": scd_config, "control": control}, directory, report_layers(scd_config), parallel)
    comparison = compare_runs(runs["scd"], runs["control"])
    (directory / "ab_compare.json").write_text(
        json.dumps(comparison.to_dict(), sort_keys=True, indent=2), encoding="utf-8"
    )
    return comparison


SWEEP_COLUMNS = ["variant", "layer", "epsilon", "task_loss", "mean_abs_p", "frac_over", "mean_excess"]


def sweep(
    config: ExperimentConfig,
    variants: Iterable[str],
    directory: str | Path | None = None,
    parallel: bool = False,
) -> list[dict[str, Any]]:
    """
    Train one arm per variant tag and tabulate the final statistics in sweep.csv.

    Every arm tracks the union of the layers named by the base configuration
    and the variants, so rows are comparable across variants (including 'none').
    """
    directory = Path(directory) if directory is not None else config.output.resolve_directory()
    configs: dict[str, ExperimentConfig] = {}
    for tag in variants:
        scd = ScdConfig.from_variant(tag, config.scd)
        configs[scd.variant_tag] = config.with_scd(scd)
    if not configs:
        raise ConfigError("sweep needs at least one variant tag")
    tracked = set(report_layers(config))
    for arm in configs.values():
        tracked.update(arm.scd.layers)
    runs = run_arms(configs, directory, sorted(tracked), parallel)

    rows = []
    for name, run in runs.items():
        for layer, entry in sorted(run.final_report.layers.items()):
            rows.append(
                {
                    "variant": name,
                    "layer": layer,
                    "epsilon": run.final_report.epsilon,
                    "task_loss": run.final_losses.task_loss,
                    "mean_abs_p": entry.mean_abs,
                    "frac_over": entry.frac_over,
                    "mean_excess": entry.mean_excess,
                }
            )

    directory.mkdir(parents=True, exist_ok=True)
    with (directory / "sweep.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: repr(value) if isinstance(value, float) else value for key, value in row.items()})
    return rows

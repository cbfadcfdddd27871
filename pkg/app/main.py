"""
Command-line interface for SCD experiments.

Commands:
- train:       train one model from a config; writes metrics, reports, checkpoint
- ab-compare:  train with and without SCD on the same seed and compare
- sweep:       train one arm per SCD variant tag; writes sweep.csv
- shapes:      print the activation-size table of an embedding
- gradcheck:   run the finite-difference suite
- report:      correlation report of a saved checkpoint

Exit codes: 0 success, 1 invalid input, 2 failed numerical check.
"""

import argparse
import functools
import logging
import sys
from typing import Callable

from pydantic import ValidationError

from app.checkpoint import load_checkpoint, read_checkpoint
from app.config import ExperimentConfig, ScdConfig, TrainConfig, get_settings, load_experiment_config
from app.diagnostics import full_correlation_report
from app.errors import ConfigError, ShapeError
from app.experiment import ab_compare, run_experiment, sweep
from app.gradcheck import run_suite
from app.layers import PRESETS, EmbeddingConfig, infer_shapes
from app.trainer import PairSpec, RunStreams, make_batch

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CHECK_FAILED = 2

DEFAULT_SWEEP_VARIANTS = ("none", "L3_M0.2", "L3_M0.3", "L3_M0.5")


def _format_validation_error(error: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(part) for part in e['loc']) or '<root>'}: {e['msg']}" for e in error.errors())


def _exit_on_invalid(command: Callable[..., int]) -> Callable[..., int]:
    """Turn configuration and shape errors into a logged diagnostic and exit code 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs) -> int:
        try:
            return command(*args, **kwargs)
        except ValidationError as e:
            logger.error(f"Invalid configuration: {_format_validation_error(e)}")
        except (ConfigError, ShapeError) as e:
            logger.error(f"Invalid input: {e}")
        return EXIT_INVALID

    return wrapper


def resolve_config(
    config_path: str | None = None,
    seed: int | None = None,
    out: str | None = None,
    preset: str | None = None,
    variant: str | None = None,
) -> ExperimentConfig:
    """
    Build the experiment configuration from a file or a preset plus CLI overrides.

    Without a config file, 'table1' gives the full recipe and anything else
    the desk-scale defaults.
    """
    if config_path is not None:
        config = load_experiment_config(config_path)
        if preset is not None:
            config = config.updated(embedding={"preset": preset, "layers": None})
    elif preset == "table1":
        config = ExperimentConfig.table1()
    else:
        config = ExperimentConfig.desk()

    if seed is not None:
        config = config.updated(train={"seed": seed})
    if out is not None:
        config = config.updated(output={"directory": out})
    if variant is not None:
        config = config.with_scd(ScdConfig.from_variant(variant, config.scd))
    return config


@_exit_on_invalid
def cmd_train(
    config_path: str | None = None,
    seed: int | None = None,
    out: str | None = None,
    preset: str | None = None,
    variant: str | None = None,
) -> int:
    config = resolve_config(config_path, seed, out, preset, variant)
    result = run_experiment(config)
    for line in result.final_report.summary_lines():
        print(line)
    print(f"final task loss {result.final_losses.task_loss:.6f}; outputs in {result.directory}")
    return EXIT_OK


@_exit_on_invalid
def cmd_ab_compare(
    config_path: str | None = None,
    seed: int | None = None,
    out: str | None = None,
    preset: str | None = None,
    variant: str | None = None,
    parallel: bool = False,
) -> int:
    config = resolve_config(config_path, seed, out, preset, variant)
    comparison = ab_compare(config, parallel=parallel)
    for line in comparison.table_lines():
        print(line)
    if not comparison.passed:
        logger.error("SCD arm did not beat the control on every criterion")
        return EXIT_CHECK_FAILED
    return EXIT_OK


@_exit_on_invalid
def cmd_sweep(
    config_path: str | None = None,
    seed: int | None = None,
    out: str | None = None,
    preset: str | None = None,
    variants: list[str] | None = None,
    parallel: bool = False,
) -> int:
    config = resolve_config(config_path, seed, out, preset)
    rows = sweep(config, variants or DEFAULT_SWEEP_VARIANTS, parallel=parallel)
    print(f"{'variant':<12}{'layer':>6}{'task':>10}{'mean|p|':>10}{'frac>eps':>10}{'excess':>10}")
    for row in rows:
        print(
            f"{row['variant']:<12}{row['layer']:>6}{row['task_loss']:>10.4f}{row['mean_abs_p']:>10.4f}"
            f"{row['frac_over']:>10.4f}{row['mean_excess']:>10.4f}"
        )
    return EXIT_OK


def shapes_table(embedding: EmbeddingConfig) -> list[str]:
    """Activation sizes after every conv and pool layer for both input sizes."""
    exemplar = infer_shapes(embedding, (embedding.exemplar_size, embedding.exemplar_size))
    search = infer_shapes(embedding, (embedding.search_size, embedding.search_size))
    descs = dict(zip(embedding.layer_names, embedding.layers))
    lines = [f"{'Layer':<7}{'Kernel':<9}{'Stride':<8}{'Exemplar':<10}{'Search':<10}{'Chans':<6}"]
    z_in, x_in = embedding.exemplar_size, embedding.search_size
    lines.append(f"{'input':<7}{'':<9}{'':<8}{f'{z_in}×{z_in}':<10}{f'{x_in}×{x_in}':<10}{embedding.in_channels:<6}")
    for z_row, x_row in zip(exemplar, search):
        desc = descs[z_row.layer]
        lines.append(
            f"{z_row.layer:<7}{f'{desc.kernel}×{desc.kernel}':<9}{desc.stride:<8}"
            f"{f'{z_row.h}×{z_row.w}':<10}{f'{x_row.h}×{x_row.w}':<10}{z_row.c:<6}"
        )
    return lines


@_exit_on_invalid
def cmd_shapes(config_path: str | None = None, preset: str | None = None) -> int:
    if config_path is not None:
        embedding = load_experiment_config(config_path).embedding_config
    else:
        embedding = PRESETS[preset or "table1"]()
    for line in shapes_table(embedding):
        print(line)
    return EXIT_OK


def cmd_gradcheck(seeds: int | None = None) -> int:
    results = run_suite(seeds=seeds)
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.op:<18} worst rel. error {result.worst_error:.3e}  {status}")
    failed = [result.op for result in results if not result.passed]
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


@_exit_on_invalid
def cmd_report(
    checkpoint_path: str,
    config_path: str | None = None,
    seed: int | None = None,
    out: str | None = None,
    epsilon: float | None = None,
) -> int:
    """
    Correlation report of a saved model on a held-out batch.

    The batch comes from the evaluation stream of the checkpoint's seed, so
    a checkpoint written by train is evaluated on the images its metrics used.
    """
    model = load_checkpoint(checkpoint_path)
    metadata = read_checkpoint(checkpoint_path).get("metadata", {})
    if config_path is not None:
        config = load_experiment_config(config_path)
        train, scd = config.train, config.scd
    else:
        train, scd = TrainConfig(), ScdConfig(enabled=False, layers=())
    seed = seed if seed is not None else int(metadata.get("seed", train.seed))
    margin = epsilon if epsilon is not None else scd.epsilon
    layers = model.scd_taps or scd.layers or model.embedding.default_scd_layers or (model.embedding.conv_count,)

    streams = RunStreams.from_seed(seed, model.embedding.conv_count)
    spec = PairSpec.from_config(model.embedding, train.data)
    eval_batch = make_batch(streams.eval, spec, train.eval_batch_size)
    report = full_correlation_report(
        model,
        eval_batch.search,
        layers,
        epsilon=margin,
        delta=scd.denom_stabilizer,
        epoch=metadata.get("epoch"),
    )
    if out is not None:
        logger.info(f"Wrote correlation report to {report.save(out)}")
        for line in report.summary_lines():
            print(line)
    else:
        print(report.to_json())
    return EXIT_OK


def _add_run_options(parser: argparse.ArgumentParser, with_variant: bool = True) -> None:
    parser.add_argument("--config", dest="config_path", help="experiment JSON file")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="embedding preset")
    if with_variant:
        parser.add_argument("--variant", help="SCD variant tag, e.g. L3_M0.3 or none")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scd", description="Stochastic channel decorrelation experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train one model")
    _add_run_options(train)
    train.set_defaults(handler=lambda a: cmd_train(a.config_path, a.seed, a.out, a.preset, a.variant))

    ab = commands.add_parser("ab-compare", help="SCD vs. no-SCD on the same seed")
    _add_run_options(ab)
    ab.add_argument("--parallel", action="store_true", help="train both arms on worker threads")
    ab.set_defaults(handler=lambda a: cmd_ab_compare(a.config_path, a.seed, a.out, a.preset, a.variant, a.parallel))

    sweep_parser = commands.add_parser("sweep", help="one run per SCD variant tag")
    _add_run_options(sweep_parser, with_variant=False)
    sweep_parser.add_argument("--variant", dest="variants", action="append", help="variant tag (repeatable)")
    sweep_parser.add_argument("--parallel", action="store_true", help="train arms on worker threads")
    sweep_parser.set_defaults(
        handler=lambda a: cmd_sweep(a.config_path, a.seed, a.out, a.preset, a.variants, a.parallel)
    )

    shapes = commands.add_parser("shapes", help="print activation sizes")
    shapes.add_argument("--config", dest="config_path", help="experiment JSON file")
    shapes.add_argument("--preset", choices=sorted(PRESETS), help="embedding preset (default table1)")
    shapes.set_defaults(handler=lambda a: cmd_shapes(a.config_path, a.preset))

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient suite")
    gradcheck.add_argument("--seeds", type=int, help="random seeds per operation")
    gradcheck.set_defaults(handler=lambda a: cmd_gradcheck(a.seeds))

    report = commands.add_parser("report", help="correlation report of a checkpoint")
    report.add_argument("--checkpoint", required=True, help="checkpoint JSON file")
    report.add_argument("--config", dest="config_path", help="experiment JSON the checkpoint came from")
    report.add_argument("--seed", type=int, help="seed of the evaluation stream")
    report.add_argument("--epsilon", type=float, help="margin for the summary statistics")
    report.add_argument("--out", help="write the report JSON here instead of stdout")
    report.set_defaults(handler=lambda a: cmd_report(a.checkpoint, a.config_path, a.seed, a.out, a.epsilon))

    return parser


def main(argv: list[str] | None = None) -> int:
    settings = get_settings()
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    args = build_parser().parse_args(argv)
    logger.debug(f"Running command '{args.command}'")
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())

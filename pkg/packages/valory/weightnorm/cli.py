# -*- coding: utf-8 -*-
# ------------------------------------------------------------------------------
#
#   Copyright 2024 Valory AG
#
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#
#       http://www.apache.org/licenses/LICENSE-2.0
#
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.
#
# ------------------------------------------------------------------------------

"""This module contains the command-line interface."""

import logging
import sys
from contextlib import contextmanager
from dataclasses import astuple
from pathlib import Path
from typing import Any, Generator, Optional

import click
from aea.helpers.logging import setup_logger

from packages.valory.weightnorm.analysis import (
    LayerAnalysisRow,
    NormTraceRow,
    analyze_layer,
    self_stabilization,
)
from packages.valory.weightnorm.checkpoint import load_checkpoint
from packages.valory.weightnorm.data import load_dataset
from packages.valory.weightnorm.exceptions import (
    ConfigError,
    DataError,
    DivergenceError,
    WeightNormLabError,
)
from packages.valory.weightnorm.gradcheck import (
    DEFAULT_STEP,
    SUITE_BATCH,
    gradcheck_suite,
)
from packages.valory.weightnorm.harness import (
    compare_parameterizations,
    initialized_template,
    make_model,
    run_experiment,
)
from packages.valory.weightnorm.models import ExperimentConfig, load_config
from packages.valory.weightnorm.network import NormMode
from packages.valory.weightnorm.payloads import header, write_csv


_logger = setup_logger("weightnorm.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class PathArgument(click.Path):
    """Path parameter for CLI."""

    def convert(
        self, value: Any, param: Optional[click.Parameter], ctx: Optional[click.Context]
    ) -> Optional[Path]:
        """Convert path string to `pathlib.Path`"""
        path_string = super().convert(value, param, ctx)
        return None if path_string is None else Path(path_string)


class ExitCodeGroup(click.Group):
    """Group that reports usage errors with the configuration exit code."""

    def main(self, *args: Any, **kwargs: Any) -> Any:  # type: ignore[override]
        """Run the group and exit with the mapped status."""
        standalone = kwargs.pop("standalone_mode", True)
        try:
            result = super().main(*args, standalone_mode=False, **kwargs)
            code = result if isinstance(result, int) else EXIT_OK
        except click.UsageError as e:
            e.show()
            code = EXIT_CONFIG
        except click.ClickException as e:
            e.show()
            code = e.exit_code
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_CONFIG
        if standalone:
            sys.exit(code)
        return code


@contextmanager
def _exit_codes(ctx: click.Context) -> Generator[None, None, None]:
    """Map library errors to exit codes."""
    try:
        yield
    except ConfigError as e:
        _logger.error(f"Configuration error: {e}")
        ctx.exit(EXIT_CONFIG)
    except DataError as e:
        _logger.error(f"Data error: {e}")
        ctx.exit(EXIT_DATA)
    except DivergenceError as e:
        _logger.error(f"Numerical divergence: {e}")
        ctx.exit(EXIT_DIVERGED)
    except WeightNormLabError as e:
        _logger.error(f"Invalid experiment: {e}")
        ctx.exit(EXIT_CONFIG)


def _set_log_level(level: str) -> None:
    """Apply the level to every library logger."""
    numeric = getattr(logging, level)
    for name in list(logging.root.manager.loggerDict):
        if name == "weightnorm" or name.startswith("weightnorm."):
            logging.getLogger(name).setLevel(numeric)


def _config(ctx: click.Context, **overrides: Any) -> ExperimentConfig:
    """Load the configuration named on the group and apply overrides."""
    path: Optional[Path] = ctx.obj["config"]
    cfg = load_config(path) if path is not None else ExperimentConfig()
    return cfg.override(seed=ctx.obj["seed"], out=ctx.obj["out"], **overrides)


@click.group(name="weightnorm", cls=ExitCodeGroup)
@click.option(
    "--config",
    "config_path",
    type=PathArgument(dir_okay=False),
    default=None,
    help="JSON or YAML experiment configuration.",
)
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--out", type=str, default=None, help="Override the output CSV path.")
@click.option(
    "--log-level",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
    default="INFO",
    help="Logging level.",
)
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], seed: Optional[int], out: Optional[str], log_level: str) -> None:
    """Weight normalization experiments."""
    _set_log_level(log_level.upper())
    ctx.ensure_object(dict)
    ctx.obj.update(config=config_path, seed=seed, out=out)


@cli.command()
@click.option("--mode", type=click.Choice([mode.value for mode in NormMode]), default=None, help="Parameterization.")
@click.option("--lr", type=float, default=None, help="Learning rate.")
@click.option("--epochs", type=int, default=None, help="Number of epochs.")
@click.option("--checkpoint", type=PathArgument(dir_okay=False), default=None, help="Save the trained model here.")
@click.pass_context
def train(
    ctx: click.Context, mode: Optional[str], lr: Optional[float], epochs: Optional[int], checkpoint: Optional[Path]
) -> None:
    """Train one parameterization."""
    with _exit_codes(ctx):
        cfg = _config(ctx, mode=mode, lr=lr, epochs=epochs)
        record = run_experiment(cfg, checkpoint)
        if record.diverged:
            raise DivergenceError(record.diagnostic)
        click.echo(f"{record.mode}: final train error {record.final.train_error:.4f}, test error {record.final.test_error:.4f}")


@cli.command()
@click.option("--epochs", type=int, default=None, help="Number of epochs.")
@click.option("--workers", type=int, default=None, help="Parallel grid cells.")
@click.pass_context
def compare(ctx: click.Context, epochs: Optional[int], workers: Optional[int]) -> None:
    """Run the five-way parameterization grid."""
    with _exit_codes(ctx):
        cfg = _config(ctx, epochs=epochs, workers=workers)
        comparison = compare_parameterizations(cfg)
        for row in comparison.summary:
            best = "all diverged" if row.best_lr is None else f"best lr {row.best_lr:g}, final train error {row.final_train_error:.4f}"
            runs = f"{row.stable_runs} stable runs, {row.diverged_runs} diverged"
            click.echo(f"{row.mode}: {best}, {runs}")


@cli.command()
@click.option("--checkpoint", type=PathArgument(dir_okay=False), required=True, help="Checkpoint to analyze.")
@click.option("--layer", type=int, default=None, help="Layer index; defaults to the first weight layer.")
@click.option("--units", type=int, default=8, show_default=True, help="Units to analyze.")
@click.option("--probe", "probe_size", type=int, default=256, show_default=True, help="Probe examples.")
@click.option(
    "--stabilization-steps",
    type=int,
    default=0,
    show_default=True,
    help="Also run the paired lr / 10 lr plain-SGD experiment for this many steps.",
)
@click.pass_context
def analyze(
    ctx: click.Context, checkpoint: Path, layer: Optional[int], units: int, probe_size: int, stabilization_steps: int
) -> None:
    """Gradient covariance, alignment and norm traces."""
    with _exit_codes(ctx):
        cfg = _config(ctx)
        dataset = load_dataset(cfg.dataset, cfg.seed)
        model = load_checkpoint(checkpoint)
        index = layer if layer is not None else model.weight_layers[0][0]
        x, labels = dataset.x_train[:probe_size], dataset.y_train[:probe_size]
        rows = analyze_layer(model, x, labels, index, units)
        path = write_csv(cfg.out, header(LayerAnalysisRow), (astuple(row) for row in rows))
        for row in rows:
            click.echo(f"layer {row.layer} unit {row.unit}: alignment {row.alignment:.4f}")
        if stabilization_steps > 0:
            template = initialized_template(cfg, dataset)
            report = self_stabilization(
                lambda: make_model(template, cfg, NormMode.WEIGHT_NORM), x, labels, cfg.base_lr, stabilization_steps
            )
            trace_path = path.with_name(f"{path.stem}_trace.csv")
            write_csv(
                trace_path,
                ("run",) + header(NormTraceRow),
                [("low", *astuple(row)) for row in report.low.rows] + [("high", *astuple(row)) for row in report.high.rows],
            )
            click.echo(f"effective-scale ratio for {report.lr_ratio:g}x lr: {report.late_ratio:.4f}")


@cli.command()
@click.option("--h", "step", type=float, default=DEFAULT_STEP, show_default=True, help="Finite-difference step.")
@click.option("--batch", type=int, default=SUITE_BATCH, show_default=True, help="Batch size.")
@click.pass_context
def gradcheck(ctx: click.Context, step: float, batch: int) -> None:
    """Finite-difference check of every parameterization."""
    with _exit_codes(ctx):
        cfg = _config(ctx)
        reports = gradcheck_suite(cfg.seed, cfg.modes, batch, step)
        rows = [
            (mode.value, name, len(check.errors), check.skipped, check.worst)
            for mode, report in reports.items()
            for name, check in report.parameters.items()
        ]
        write_csv(cfg.out, ("mode", "parameter", "checked", "skipped", "worst"), rows)
        failed = [mode.value for mode, report in reports.items() if not report.passed()]
        for mode, report in reports.items():
            click.echo(f"{mode.value}: {report.fraction_within():.2%} within tolerance, worst {report.worst:.2e}")
        if failed:
            raise DivergenceError(f"Gradient check failed for {', '.join(failed)}")


if __name__ == "__main__":
    cli()  # pylint: disable=no-value-for-parameter

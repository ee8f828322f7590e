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

"""
This module contains the experiment harness.

Every run starts from one weight-normalized template that is built and
initialized from the data once, then converted to the requested
parameterization, so all modes share the same effective weights at step 0.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from aea.helpers.logging import setup_logger

from packages.valory.weightnorm.checkpoint import save_checkpoint
from packages.valory.weightnorm.data import Dataset, load_dataset, minibatches
from packages.valory.weightnorm.exceptions import (
    BuildError,
    ConfigError,
    DegenerateDirectionError,
    DivergenceError,
)
from packages.valory.weightnorm.models import ExperimentConfig, Schedule
from packages.valory.weightnorm.network import (
    LayerKind,
    LayerSpec,
    ModelState,
    NormMode,
    backward,
    build_initialized,
    convert_model,
    forward,
    named_architecture,
    prime_running_statistics,
    softmax_xent,
)
from packages.valory.weightnorm.normalization import Mode
from packages.valory.weightnorm.numerics import RngStream, Tensor, permutation
from packages.valory.weightnorm.optim import (
    EmaState,
    FIRST_PHASE_MOMENTUM,
    Optimizer,
    default_ema_decay,
    ema_update,
    lr_schedule,
)
from packages.valory.weightnorm.payloads import (
    ComparisonRow,
    EpochRow,
    RunRecord,
    SummaryRow,
    header,
    write_csv,
)
from packages.valory.weightnorm.weightnorm import unit_norms


_logger = setup_logger("weightnorm.harness")

EVAL_BATCH_SIZE = 500


def model_specs(
    cfg: ExperimentConfig, dataset: Dataset, norm_mode: NormMode = NormMode.WEIGHT_NORM
) -> Tuple[List[LayerSpec], Tuple[int, ...]]:
    """Layer specifications and input shape for the configured architecture on a dataset."""
    if cfg.layers is not None:
        specs = [spec.with_mode(norm_mode, cfg.log_scale) for spec in cfg.layers]
        first = specs[0].kind
        input_shape = dataset.input_shape if first is LayerKind.CONV2D else (dataset.dim,)
        return specs, input_shape
    convolutional = cfg.architecture not in ("mlp", "mlp-small")
    if convolutional and len(dataset.input_shape) != 3:
        raise ConfigError(f"Architecture {cfg.architecture!r} needs image data, got input shape {dataset.input_shape}")
    input_shape = dataset.input_shape if convolutional else (dataset.dim,)
    return named_architecture(cfg.architecture, norm_mode, input_shape, dataset.classes, cfg.log_scale)


@dataclass
class Template:
    """The shared initialized model and the batch it was initialized on."""

    model: ModelState
    x_init: Tensor


def initialized_template(cfg: ExperimentConfig, dataset: Dataset) -> Template:
    """Build and data-dependently initialize the weight-normalized template."""
    specs, input_shape = model_specs(cfg, dataset)
    seed = RngStream(cfg.seed)
    count = min(cfg.init_batch_size, dataset.x_train.shape[0])
    x_init = dataset.x_train[permutation(seed.derive("init"), dataset.x_train.shape[0])[:count]]
    try:
        model, reports = build_initialized(specs, seed.derive("model"), x_init, input_shape, cfg.init_eps)
    except BuildError as e:
        raise ConfigError(f"Architecture does not fit the data: {e}") from e
    worst = max(float(np.max(np.abs(report.post_std - 1.0))) for report in reports)
    _logger.info(f"Initialized {len(reports)} weight layers on {count} examples (max |std - 1| = {worst:.2e})")
    return Template(model=model, x_init=x_init)


def make_model(template: Template, cfg: ExperimentConfig, norm_mode: NormMode) -> ModelState:
    """Convert the template to a parameterization, with running statistics seeded."""
    model = convert_model(template.model, norm_mode, cfg.log_scale, cfg.bn_eps, cfg.bn_momentum)
    if norm_mode in (NormMode.BATCH_NORM, NormMode.WEIGHT_NORM_MEAN_ONLY, NormMode.MEAN_ONLY):
        prime_running_statistics(model, template.x_init)
    return model


def evaluate(model: ModelState, x: Tensor, labels: np.ndarray) -> Tuple[float, float]:
    """Eval-mode mean loss and error rate."""
    total_loss, wrong = 0.0, 0
    for start in range(0, x.shape[0], EVAL_BATCH_SIZE):
        batch, batch_labels = x[start : start + EVAL_BATCH_SIZE], labels[start : start + EVAL_BATCH_SIZE]
        _, logits = forward(model, batch, Mode.EVAL)
        loss, _ = softmax_xent(logits, batch_labels)
        total_loss += loss * batch.shape[0]
        wrong += int(np.sum(np.argmax(logits, axis=1) != batch_labels))
    return total_loss / x.shape[0], wrong / x.shape[0]


def scale_summary(model: ModelState) -> Tuple[float, float]:
    """
    Mean effective scale g/||v|| and mean ||v|| over all units.

    Standard layers count as g/||v|| = 1 with ||w|| in place of ||v||.
    """
    ratios, norms = [], []
    for _, layer in model.weight_layers:
        if layer.param is not None:
            unit_v = unit_norms(layer.param.v)
            ratios.append(layer.param.g / unit_v)
            norms.append(unit_v)
        else:
            unit_w = unit_norms(layer.effective_weight())
            ratios.append(np.ones_like(unit_w))
            norms.append(unit_w)
    return float(np.mean(np.concatenate(ratios))), float(np.mean(np.concatenate(norms)))


def _check_finite(model: ModelState) -> None:
    """Raise DivergenceError on any non-finite parameter."""
    for name, value in model.parameters().items():
        if not np.all(np.isfinite(value)):
            raise DivergenceError(f"Parameter {name} became non-finite")


def _train_epoch(
    model: ModelState, optimizer: Optimizer, dataset: Dataset, batches: Sequence[np.ndarray], ema: Optional[EmaState]
) -> None:
    """One pass over the training set."""
    params = model.parameters()
    for indices in batches:
        cache, logits = forward(model, dataset.x_train[indices], Mode.TRAIN)
        loss, grad_logits = softmax_xent(logits, dataset.y_train[indices])
        if not np.isfinite(loss):
            raise DivergenceError(f"Training loss became {loss}")
        optimizer.step(params, backward(model, cache, grad_logits))
        _check_finite(model)
        try:
            model.refresh()
        except DegenerateDirectionError as e:
            raise DivergenceError(str(e)) from e
        if ema is not None:
            ema_update(ema, params)


def _evaluate_epoch(model: ModelState, dataset: Dataset, ema: Optional[EmaState]) -> Tuple[float, float, float]:
    """Train loss, train error and test error, Polyak-averaged when ema is given."""
    if ema is None:
        train_loss, train_error = evaluate(model, dataset.x_train, dataset.y_train)
        _, test_error = evaluate(model, dataset.x_test, dataset.y_test)
        return train_loss, train_error, test_error
    with ema.apply(model.parameters()):
        model.refresh()
        return _evaluate_epoch(model, dataset, None)


def train_model(
    cfg: ExperimentConfig, dataset: Dataset, template: Template, norm_mode: NormMode, lr: float
) -> Tuple[RunRecord, ModelState]:
    """
    Train one (mode, lr) cell.

    Divergence ends the run early and is recorded, not raised.
    """
    model = make_model(template, cfg, norm_mode)
    optimizer = Optimizer(cfg.optimizer, lr, momentum=FIRST_PHASE_MOMENTUM)
    batch_rng = RngStream(cfg.seed).derive("batches")
    steps_per_epoch = len(minibatches(batch_rng.copy(), dataset.x_train.shape[0], cfg.batch_size))
    ema = EmaState(cfg.ema_decay or default_ema_decay(steps_per_epoch)) if cfg.polyak else None
    initial_loss, initial_error = evaluate(model, dataset.x_train, dataset.y_train)
    rows: List[EpochRow] = []
    diverged, diagnostic = False, ""
    for epoch in range(cfg.epochs):
        if cfg.schedule is Schedule.TWO_PHASE:
            optimizer.set_schedule(*lr_schedule(epoch, cfg.epochs, lr))
        started = time.perf_counter()
        try:
            _train_epoch(model, optimizer, dataset, minibatches(batch_rng, dataset.x_train.shape[0], cfg.batch_size), ema)
            train_loss, train_error, test_error = _evaluate_epoch(model, dataset, ema)
            model.refresh()
            if not np.isfinite(train_loss):
                raise DivergenceError(f"Evaluation loss became {train_loss}")
        except DivergenceError as e:
            diverged, diagnostic = True, f"epoch {epoch + 1}: {e}"
            _logger.warning(f"{norm_mode.value} lr={lr:g} diverged at {diagnostic}")
            break
        g_over_v, v_norm = scale_summary(model)
        rows.append(
            EpochRow(
                epoch=epoch + 1,
                train_loss=train_loss,
                train_error=train_error,
                test_error=test_error,
                g_over_v=g_over_v,
                v_norm=v_norm,
                wall_seconds=time.perf_counter() - started,
            )
        )
        _logger.info(
            f"{norm_mode.value} lr={lr:g} epoch {epoch + 1}/{cfg.epochs}: "
            f"loss={train_loss:.4f} train_err={train_error:.4f} test_err={test_error:.4f}"
        )
    record = RunRecord(
        mode=norm_mode.value,
        lr=lr,
        seed=cfg.seed,
        initial_train_loss=initial_loss,
        initial_train_error=initial_error,
        rows=tuple(rows),
        diverged=diverged,
        diagnostic=diagnostic,
    )
    return record, model


def run_experiment(cfg: ExperimentConfig, checkpoint: Optional[Path] = None) -> RunRecord:
    """
    Train cfg.norm_mode at the first learning rate of the grid and write the per-epoch CSV to cfg.out.

    :param cfg: the configuration.
    :param checkpoint: where to save the trained model, if anywhere.
    :return: the run record.
    """
    _logger.info(f"Starting {cfg.norm_mode.value} run, seed {cfg.seed}, lr {cfg.base_lr:g}")
    dataset = load_dataset(cfg.dataset, cfg.seed)
    template = initialized_template(cfg, dataset)
    record, model = train_model(cfg, dataset, template, cfg.norm_mode, cfg.base_lr)
    path = record.write(cfg.out)
    _logger.info(f"Wrote {len(record.rows)} epochs to {path}")
    if checkpoint is not None:
        save_checkpoint(checkpoint, model)
        _logger.info(f"Saved checkpoint to {checkpoint}")
    return record


def summarize(records: Sequence[RunRecord], modes: Sequence[NormMode], threshold: float) -> List[SummaryRow]:
    """
    Best-lr outcome per mode.

    The best run has the lowest final train loss among non-diverged runs; ties go
    to the smaller learning rate. Overheads are relative to the standard mode.
    """
    best: Dict[str, Optional[RunRecord]] = {}
    for mode in modes:
        candidates = [r for r in records if r.mode == mode.value and not r.diverged and r.final is not None]
        best[mode.value] = min(candidates, key=lambda r: (r.final.train_loss, r.lr)) if candidates else None
    baseline = best.get(NormMode.STANDARD.value)
    baseline_seconds = baseline.mean_epoch_seconds() if baseline is not None else None
    rows = []
    for mode in modes:
        run = best[mode.value]
        stable = sum(1 for r in records if r.mode == mode.value and r.stable)
        diverged = sum(1 for r in records if r.mode == mode.value and r.diverged)
        seconds = run.mean_epoch_seconds() if run is not None else None
        overhead = seconds / baseline_seconds if seconds is not None and baseline_seconds else None
        rows.append(
            SummaryRow(
                mode=mode.value,
                best_lr=run.lr if run is not None else None,
                final_train_error=run.final.train_error if run is not None else None,
                final_test_error=run.final.test_error if run is not None else None,
                epochs_to_threshold=run.epochs_to_threshold(threshold) if run is not None else None,
                stable_runs=stable,
                diverged_runs=diverged,
                mean_epoch_seconds=seconds,
                relative_overhead=overhead,
            )
        )
    return rows


def summary_path(out: Path) -> Path:
    """<stem>_summary.csv next to the long-format CSV."""
    return out.with_name(f"{out.stem}_summary.csv")


@dataclass(frozen=True)
class Comparison:
    """Outcome of the parameterization grid."""

    records: Tuple[RunRecord, ...]
    summary: Tuple[SummaryRow, ...]
    csv_path: Path
    summary_csv_path: Path

    def record(self, mode: NormMode, lr: float) -> RunRecord:
        """The run of one cell."""
        for record in self.records:
            if record.mode == mode.value and record.lr == lr:
                return record
        raise KeyError((mode.value, lr))


def compare_parameterizations(cfg: ExperimentConfig) -> Comparison:
    """
    Run every (mode, lr) cell of the grid from the same initialized parameters.

    Cells run on cfg.workers threads, each with its own model, optimizer and
    streams; rows are written in (mode, lr) order once all cells finish.
    """
    dataset = load_dataset(cfg.dataset, cfg.seed)
    template = initialized_template(cfg, dataset)
    cells = [(mode, lr) for mode in cfg.modes for lr in cfg.lr_grid]
    _logger.info(f"Comparing {len(cfg.modes)} modes x {len(cfg.lr_grid)} learning rates on {cfg.workers} workers")

    def run_cell(cell: Tuple[NormMode, float]) -> RunRecord:
        mode, lr = cell
        record, _ = train_model(cfg, dataset, template, mode, lr)
        status = "diverged" if record.diverged else f"final train error {record.final.train_error:.4f}"
        _logger.info(f"Cell {mode.value} lr={lr:g} done: {status}")
        return record

    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        records = tuple(executor.map(run_cell, cells))
    out = Path(cfg.out)
    csv_path = write_csv(
        out,
        header(ComparisonRow),
        (astuple(row) for record in records for row in record.comparison_rows()),
    )
    summary = tuple(summarize(records, cfg.modes, cfg.error_threshold))
    summary_csv = write_csv(
        summary_path(out),
        header(SummaryRow),
        (astuple(row) for row in summary),
    )
    _logger.info(f"Wrote {csv_path} and {summary_csv}")
    return Comparison(records=records, summary=summary, csv_path=csv_path, summary_csv_path=summary_csv)

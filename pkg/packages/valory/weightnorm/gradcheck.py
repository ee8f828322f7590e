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

"""This module contains the finite-difference check of the full-network gradients."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from aea.exceptions import enforce
from aea.helpers.logging import setup_logger

from packages.valory.weightnorm.data import synth_dataset
from packages.valory.weightnorm.network import (
    Activation,
    LayerSpec,
    ModelState,
    NormMode,
    backward,
    build_initialized,
    convert_model,
    forward,
    kink_signature,
    prime_running_statistics,
    probe,
    softmax_xent,
)
from packages.valory.weightnorm.normalization import Mode
from packages.valory.weightnorm.numerics import RngStream, Tensor


_logger = setup_logger("weightnorm.gradcheck")

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5
DEFAULT_WORST = 1e-4
DEFAULT_FRACTION = 0.99
FLOOR_FRACTION = 1e-4
ABSOLUTE_FLOOR = 1e-8
SUITE_LAYERS = (4, 6, 5, 3)
SUITE_BATCH = 8


@dataclass
class ParameterCheck:
    """Relative errors of one parameter tensor."""

    name: str
    errors: List[float] = field(default_factory=list)
    skipped: int = 0

    @property
    def worst(self) -> float:
        """Largest relative error, 0 when nothing was checked."""
        return max(self.errors, default=0.0)


@dataclass
class GradCheckReport:
    """Outcome of a gradient check."""

    parameters: Dict[str, ParameterCheck] = field(default_factory=dict)

    @property
    def errors(self) -> List[float]:
        """Every checked coordinate's relative error."""
        return [error for check in self.parameters.values() for error in check.errors]

    @property
    def checked(self) -> int:
        """Number of compared coordinates."""
        return len(self.errors)

    @property
    def skipped(self) -> int:
        """Coordinates whose perturbation crossed a kink."""
        return sum(check.skipped for check in self.parameters.values())

    @property
    def worst(self) -> float:
        """Largest relative error."""
        return max(self.errors, default=0.0)

    def fraction_within(self, tolerance: float = DEFAULT_TOLERANCE) -> float:
        """Share of checked coordinates within tolerance."""
        errors = self.errors
        if not errors:
            return 1.0
        return sum(1 for error in errors if error <= tolerance) / len(errors)

    def passed(
        self, tolerance: float = DEFAULT_TOLERANCE, fraction: float = DEFAULT_FRACTION, worst: float = DEFAULT_WORST
    ) -> bool:
        """Whether enough coordinates agree and none is far off."""
        return self.checked > 0 and self.fraction_within(tolerance) >= fraction and self.worst <= worst


def _loss(model: ModelState, x: Tensor, labels: Sequence[int]) -> float:
    """Train-mode loss without side effects."""
    with probe(model):
        _, logits = forward(model, x, Mode.TRAIN)
    loss, _ = softmax_xent(logits, labels)
    return loss


def _same_pattern(a: List[Tensor], b: List[Tensor]) -> bool:
    """Whether two decision patterns agree everywhere."""
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _numeric(
    model: ModelState, x: Tensor, labels: Sequence[int], value: Tensor, index: Tuple[int, ...], h: float, reference: List[Tensor]
) -> Optional[float]:
    """Central difference at one coordinate; None when the perturbation crosses a kink."""
    original = value[index]
    try:
        losses = []
        for delta in (h, -h):
            value[index] = original + delta
            model.refresh()
            if not _same_pattern(kink_signature(model, x), reference):
                return None
            losses.append(_loss(model, x, labels))
    finally:
        value[index] = original
        model.refresh()
    return (losses[0] - losses[1]) / (2.0 * h)


def gradient_check(
    model: ModelState, x: Tensor, labels: Sequence[int], h: float = DEFAULT_STEP, names: Optional[Sequence[str]] = None
) -> GradCheckReport:
    """
    Compare backward against central differences for every scalar parameter.

    The relative error is |a - n| / max(|a|, |n|, floor) with floor set to 1e-4
    times the largest analytic gradient magnitude. The model is left unchanged.

    :param model: the model to check.
    :param x: input batch.
    :param labels: labels of the batch.
    :param h: finite-difference step.
    :param names: restrict the check to these parameters.
    :return: the report.
    """
    enforce(h > 0, f"h must be positive, got {h}", ValueError)
    with probe(model):
        cache, logits = forward(model, x, Mode.TRAIN)
        _, grad_logits = softmax_xent(logits, labels)
        analytic = backward(model, cache, grad_logits)
    reference = kink_signature(model, x)
    largest = max((float(np.max(np.abs(grad))) for grad in analytic.values() if grad.size), default=0.0)
    floor = max(FLOOR_FRACTION * largest, ABSOLUTE_FLOOR)
    report = GradCheckReport()
    for name, value in model.parameters().items():
        if names is not None and name not in names:
            continue
        check = ParameterCheck(name)
        grad = analytic[name]
        for index in np.ndindex(value.shape):
            numeric = _numeric(model, x, labels, value, index, h, reference)
            if numeric is None:
                check.skipped += 1
                continue
            a = float(grad[index])
            check.errors.append(abs(a - numeric) / max(abs(a), abs(numeric), floor))
        report.parameters[name] = check
    if report.skipped:
        _logger.warning(f"Skipped {report.skipped} coordinates at non-differentiable points")
    return report


def suite_specs(norm_mode: NormMode, widths: Sequence[int] = SUITE_LAYERS) -> List[LayerSpec]:
    """A small rectifier MLP with the given layer widths."""
    specs = []
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = index == len(widths) - 2
        activation = Activation.IDENTITY if last else Activation.RELU
        specs.append(LayerSpec.dense(fan_in, fan_out, activation, norm_mode))
    return specs


def gradcheck_suite(
    seed: int, modes: Sequence[NormMode] = tuple(NormMode), batch: int = SUITE_BATCH, h: float = DEFAULT_STEP
) -> Dict[NormMode, GradCheckReport]:
    """Check a data-initialized 3-layer MLP under every requested parameterization."""
    x, labels = synth_dataset(seed, batch, SUITE_LAYERS[0], SUITE_LAYERS[-1])
    template, _ = build_initialized(suite_specs(NormMode.WEIGHT_NORM), RngStream(seed).derive("gradcheck"), x)
    reports = {}
    for mode in modes:
        model = convert_model(template, mode)
        prime_running_statistics(model, x)
        report = gradient_check(model, x, labels, h)
        _logger.info(
            f"{mode.value}: {report.checked} coordinates, {report.fraction_within():.2%} within "
            f"{DEFAULT_TOLERANCE:g}, worst {report.worst:.2e}, skipped {report.skipped}"
        )
        reports[mode] = report
    return reports

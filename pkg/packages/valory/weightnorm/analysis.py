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
This module contains the instrumentation of the weight normalization dynamics.

It estimates per-neuron gradient covariances, projects them the way the
v-parameterization does, measures how close a weight vector is to the dominant
eigenvector, and records how ||v|| and the effective scale g/||v|| evolve.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np
from aea.exceptions import enforce
from aea.helpers.logging import setup_logger

from packages.valory.weightnorm.exceptions import (
    ContractViolationError,
    DegenerateDirectionError,
    DimensionError,
    SampleSizeError,
    UndefinedAlignmentError,
)
from packages.valory.weightnorm.network import (
    ModelState,
    WeightLayer,
    backward,
    forward,
    probe,
    softmax_xent,
)
from packages.valory.weightnorm.normalization import Mode
from packages.valory.weightnorm.numerics import Tensor, as_tensor, covariance
from packages.valory.weightnorm.optim import sgd_step
from packages.valory.weightnorm.weightnorm import WeightNormParam, unit_norms


_logger = setup_logger("weightnorm.analysis")

POWER_TOLERANCE = 1e-10
POWER_MAX_ITERATIONS = 10_000
MAX_PROBE_EXAMPLES = 256
STABILIZATION_LR_FACTOR = 10.0


@dataclass(frozen=True)
class GradCovariance:
    """Sample covariance of per-example gradients of one weight vector."""

    c: Tensor
    n_samples: int


def grad_covariance(per_example_grads: Tensor) -> GradCovariance:
    """
    Covariance (1/n convention) of per-example gradients about their mean.

    :param per_example_grads: [n x k] matrix, one gradient per row.
    :return: the covariance.
    """
    grads = as_tensor(per_example_grads)
    enforce(grads.ndim == 2, f"Expected [n x k] gradients, got {grads.shape}", DimensionError)
    enforce(grads.shape[0] >= 2, f"Need at least 2 samples, got {grads.shape[0]}", SampleSizeError)
    return GradCovariance(c=covariance(grads), n_samples=grads.shape[0])


def _single_direction(p: WeightNormParam) -> Tuple[Tensor, float, float]:
    """Flattened v, its norm and g of a single-unit parameter."""
    enforce(p.units == 1, f"Expected a single weight vector, got {p.units} units", DimensionError)
    v = p.v.ravel()
    norm_v = float(p.norm_v[0])
    enforce(norm_v > 0, "Direction vector has zero norm", DegenerateDirectionError)
    return v, norm_v, float(p.g[0])


def transformed_covariance(c: GradCovariance, p: WeightNormParam) -> Tensor:
    """
    Covariance of the v-gradient: (g^2 / ||v||^2) M_w C M_w.

    M_w projects onto the orthogonal complement of w (equivalently of v).
    """
    v, norm_v, g = _single_direction(p)
    k = v.shape[0]
    enforce(c.c.shape == (k, k), f"Covariance shape {c.c.shape} does not match {k} weights", DimensionError)
    direction = v / norm_v
    projector = np.eye(k) - np.outer(direction, direction)
    d = (g * g / (norm_v * norm_v)) * (projector @ c.c @ projector)
    return (d + d.T) / 2.0


def power_iteration(
    c: Tensor, tol: float = POWER_TOLERANCE, max_iterations: int = POWER_MAX_ITERATIONS
) -> Tuple[float, Tensor]:
    """
    Dominant eigenpair of a symmetric positive semi-definite matrix.

    Iteration starts from the row of c with the largest norm and stops when
    ||c x - lambda x|| falls to tol times the Frobenius norm of c.
    """
    c = as_tensor(c)
    enforce(c.ndim == 2 and c.shape[0] == c.shape[1], f"Expected a square matrix, got {c.shape}", DimensionError)
    scale = float(np.linalg.norm(c))
    enforce(scale > 0, "Alignment is undefined for a zero covariance", UndefinedAlignmentError)
    x = c[int(np.argmax(np.linalg.norm(c, axis=1)))].copy()
    x /= np.linalg.norm(x)
    eigenvalue = float(x @ c @ x)
    for _ in range(max_iterations):
        y = c @ x
        eigenvalue = float(x @ y)
        if np.linalg.norm(y - eigenvalue * x) <= tol * scale:
            break
        norm_y = float(np.linalg.norm(y))
        if norm_y == 0.0:
            break
        x = y / norm_y
    return eigenvalue, x


def dominant_alignment(c: GradCovariance, w: Tensor) -> float:
    """|cos| of the angle between w and the dominant eigenvector of C."""
    w = as_tensor(w).ravel()
    enforce(c.c.shape == (w.shape[0], w.shape[0]), f"Covariance shape {c.c.shape} does not match w", DimensionError)
    norm_w = float(np.linalg.norm(w))
    enforce(norm_w > 0, "w has zero norm", DegenerateDirectionError)
    _, top = power_iteration(c.c)
    return float(min(abs(top @ w) / norm_w, 1.0))


@dataclass(frozen=True)
class NormTraceRow:
    """One layer at one step."""

    step: int
    layer: int
    v_norm: float
    g: float
    g_over_v: float
    relative_update: float


@dataclass
class NormTrace:
    """Per-step, per-layer evolution of ||v||, g, g/||v|| and ||dv||/||v||."""

    rows: List[NormTraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        """Number of rows."""
        return len(self.rows)

    def column(self, name: str, layer: int) -> Tensor:
        """One column restricted to a layer, in step order."""
        return np.array([getattr(row, name) for row in self.rows if row.layer == layer], dtype=np.float64)

    def layers(self) -> List[int]:
        """Layers present in the trace."""
        return sorted({row.layer for row in self.rows})


def snapshot_directions(model: ModelState) -> Dict[int, Tensor]:
    """Copies of every v, keyed by layer index."""
    return {index: layer.param.v.copy() for index, layer in model.weight_layers if layer.param is not None}


def record_norm_trace(trace: NormTrace, model: ModelState, step: int, previous: Mapping[int, Tensor]) -> NormTrace:
    """
    Append one row per weight-normalized layer.

    Values are means over the layer's units; the relative update is
    ||v - v_previous|| / ||v_previous|| over the whole layer.

    :param trace: the trace to extend.
    :param model: the model after the update.
    :param step: the step number.
    :param previous: v of every weight-normalized layer before the update.
    :return: the trace.
    """
    layers = [(index, layer) for index, layer in model.weight_layers if layer.param is not None]
    enforce(bool(layers), "Norm traces need weight-normalized layers", ContractViolationError)
    for index, layer in layers:
        param = layer.param
        norms = unit_norms(param.v)
        before = previous[index]
        trace.rows.append(
            NormTraceRow(
                step=step,
                layer=index,
                v_norm=float(norms.mean()),
                g=float(param.g.mean()),
                g_over_v=float(np.mean(param.g / norms)),
                relative_update=float(np.linalg.norm(param.v - before) / np.linalg.norm(before)),
            )
        )
    return trace


def per_example_weight_grads(model: ModelState, x: Tensor, labels: Sequence[int], layer_index: int) -> Tensor:
    """
    Gradients of the loss with respect to one layer's effective weights, one example at a time.

    Each example runs an eval-mode pass: noise is off and normalization layers use
    their running statistics, held constant in the backward pass. At most the first
    256 examples are used and the model is left untouched.

    :return: [n x units x fan_in...] gradients.
    """
    enforce(
        0 <= layer_index < len(model.layers) and isinstance(model.layers[layer_index], WeightLayer),
        f"Layer {layer_index} is not a weight layer",
        DimensionError,
    )
    unprimed = [
        index
        for index, layer in model.weight_layers
        if (layer.bn is not None or layer.meanonly is not None) and not layer.buffers()
    ]
    enforce(
        not unprimed,
        f"Per-example gradients need running statistics, missing in layers {unprimed}",
        ContractViolationError,
    )
    x = as_tensor(x)[:MAX_PROBE_EXAMPLES]
    labels = np.asarray(labels)[:MAX_PROBE_EXAMPLES]
    grads = []
    with probe(model):
        for i in range(x.shape[0]):
            cache, logits = forward(model, x[i : i + 1], Mode.EVAL)
            _, grad_logits = softmax_xent(logits, labels[i : i + 1])
            layer_grads = backward(model, cache, grad_logits, weight_grads=True, frozen_statistics=True)
            grads.append(layer_grads[f"{layer_index}.weight"])
    return np.stack(grads)


@dataclass(frozen=True)
class LayerAnalysisRow:
    """Covariance statistics of one unit."""

    layer: int
    unit: int
    alignment: float
    trace_c: float
    trace_d: float
    top_c: float
    top_d: float


def _unit_param(layer: WeightLayer, unit: int) -> WeightNormParam:
    """A single-unit parameter view; standard layers use v = w and g = ||w||."""
    if layer.param is not None:
        return WeightNormParam.create(layer.param.v[unit].ravel(), float(layer.param.g[unit]))
    w = layer.w[unit].ravel()
    return WeightNormParam.create(w, float(np.linalg.norm(w)))


def analyze_layer(
    model: ModelState, x: Tensor, labels: Sequence[int], layer_index: int, units: int = 8
) -> List[LayerAnalysisRow]:
    """Alignment and covariance statistics of the first units of a weight layer."""
    grads = per_example_weight_grads(model, x, labels, layer_index)
    layer = model.layers[layer_index]
    rows = []
    for unit in range(min(units, grads.shape[1])):
        c = grad_covariance(grads[:, unit].reshape(grads.shape[0], -1))
        if not np.any(c.c):
            _logger.warning(f"Layer {layer_index} unit {unit} has a zero gradient covariance; skipping")
            continue
        param = _unit_param(layer, unit)
        d = transformed_covariance(c, param)
        w = layer.effective_weight()[unit]
        top_d = power_iteration(d)[0] if np.any(d) else 0.0
        rows.append(
            LayerAnalysisRow(
                layer=layer_index,
                unit=unit,
                alignment=dominant_alignment(c, w if np.any(w) else param.v),
                trace_c=float(np.trace(c.c)),
                trace_d=float(np.trace(d)),
                top_c=power_iteration(c.c)[0],
                top_d=float(top_d),
            )
        )
    _logger.info(f"Analyzed {len(rows)} units of layer {layer_index} on {grads.shape[0]} examples")
    return rows


def _plain_sgd(model: ModelState, x: Tensor, labels: Sequence[int], lr: float, steps: int) -> NormTrace:
    """Full-batch plain SGD, tracing every step."""
    trace = NormTrace()
    for step in range(steps):
        previous = snapshot_directions(model)
        cache, logits = forward(model, x, Mode.TRAIN)
        _, grad_logits = softmax_xent(logits, labels)
        sgd_step(model.parameters(), backward(model, cache, grad_logits), lr)
        model.refresh()
        record_norm_trace(trace, model, step, previous)
    return trace


@dataclass(frozen=True)
class StabilizationReport:
    """Outcome of the paired learning-rate experiment."""

    lr: float
    lr_ratio: float
    late_ratio: float
    low: NormTrace
    high: NormTrace


def self_stabilization(
    model_factory: Callable[[], ModelState], x: Tensor, labels: Sequence[int], lr: float, steps: int
) -> StabilizationReport:
    """
    Train two identical models with lr and 10 lr and compare their late effective scales.

    The late ratio is mean g/||v|| of the high-lr run over the low-lr one, taken over
    the last quarter of the steps. Growth of ||v|| pulls it below the 10x lr ratio.
    """
    enforce(steps >= 1, f"steps must be >= 1, got {steps}", ValueError)
    low = _plain_sgd(model_factory(), x, labels, lr, steps)
    high = _plain_sgd(model_factory(), x, labels, STABILIZATION_LR_FACTOR * lr, steps)
    tail = max(steps // 4, 1)

    def late(trace: NormTrace) -> float:
        return float(np.mean([trace.column("g_over_v", layer)[-tail:].mean() for layer in trace.layers()]))

    ratio = late(high) / late(low)
    _logger.info(f"Effective-scale ratio for a {STABILIZATION_LR_FACTOR:g}x learning rate: {ratio:.4f}")
    return StabilizationReport(lr=lr, lr_ratio=STABILIZATION_LR_FACTOR, late_ratio=ratio, low=low, high=high)

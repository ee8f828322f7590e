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

"""This module contains the optimizers, the learning-rate schedule and parameter averaging."""

from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Generator, Mapping, Tuple

import numpy as np
from aea.exceptions import enforce

from packages.valory.weightnorm.exceptions import DimensionError
from packages.valory.weightnorm.numerics import Tensor


Params = Dict[str, Tensor]
Grads = Mapping[str, Tensor]

DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_ADAM_EPS = 1e-8
FIRST_PHASE_MOMENTUM = 0.9
SECOND_PHASE_MOMENTUM = 0.5
EMA_WINDOW_EPOCHS = 10


class OptimizerKind(Enum):
    """Supported update rules."""

    SGD = "sgd"
    MOMENTUM = "momentum"
    ADAM = "adam"
    ADAMAX = "adamax"


@dataclass
class OptimizerState:
    """Hyperparameters and per-parameter accumulators of one training loop."""

    lr: float
    momentum: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_ADAM_EPS
    step: int = 0
    first: Dict[str, Tensor] = field(default_factory=dict)
    second: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate hyperparameters."""
        enforce(self.lr > 0, f"lr must be positive, got {self.lr}", ValueError)
        enforce(0.0 <= self.momentum < 1.0, f"momentum must be in [0, 1), got {self.momentum}", ValueError)
        enforce(0.0 <= self.beta2 < 1.0, f"beta2 must be in [0, 1), got {self.beta2}", ValueError)
        enforce(self.eps > 0, f"eps must be positive, got {self.eps}", ValueError)

    def accumulator(self, store: Dict[str, Tensor], name: str, like: Tensor) -> Tensor:
        """Zero-initialized accumulator mirroring a parameter."""
        if name not in store:
            store[name] = np.zeros_like(like)
        return store[name]


def _pairs(params: Params, grads: Grads) -> Generator[Tuple[str, Tensor, Tensor], None, None]:
    """Yield (name, parameter, gradient) for every gradient, checking shapes."""
    for name, grad in grads.items():
        enforce(name in params, f"Gradient for unknown parameter {name!r}", DimensionError)
        param = params[name]
        grad = np.asarray(grad, dtype=np.float64)
        enforce(
            grad.shape == param.shape,
            f"Gradient shape {grad.shape} does not match parameter {name!r} of shape {param.shape}",
            DimensionError,
        )
        yield name, param, grad


def sgd_step(params: Params, grads: Grads, lr: float) -> Params:
    """theta <- theta - lr * grad, in place."""
    enforce(lr > 0, f"lr must be positive, got {lr}", ValueError)
    for _, param, grad in _pairs(params, grads):
        param -= lr * grad
    return params


def momentum_step(params: Params, grads: Grads, lr: float, momentum: float, state: OptimizerState) -> Params:
    """Classical momentum: u <- momentum * u + grad; theta <- theta - lr * u."""
    enforce(lr > 0, f"lr must be positive, got {lr}", ValueError)
    enforce(0.0 <= momentum < 1.0, f"momentum must be in [0, 1), got {momentum}", ValueError)
    state.step += 1
    for name, param, grad in _pairs(params, grads):
        velocity = state.accumulator(state.first, name, param)
        velocity *= momentum
        velocity += grad
        param -= lr * velocity
    return params


def adam_step(params: Params, grads: Grads, state: OptimizerState) -> Params:
    """Bias-corrected first and second moment update."""
    state.step += 1
    beta1, beta2 = state.momentum, state.beta2
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param, grad in _pairs(params, grads):
        m = state.accumulator(state.first, name, param)
        v = state.accumulator(state.second, name, param)
        m[...] = beta1 * m + (1.0 - beta1) * grad
        v[...] = beta2 * v + (1.0 - beta2) * np.square(grad)
        m_hat = m / correction1
        v_hat = v / correction2
        param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def adamax_step(params: Params, grads: Grads, state: OptimizerState) -> Params:
    """Infinity-norm variant: u <- max(beta2 * u, |grad|); theta <- theta - lr / (1 - beta1^t) * m / u."""
    state.step += 1
    beta1 = state.momentum
    step_size = state.lr / (1.0 - beta1**state.step)
    for name, param, grad in _pairs(params, grads):
        m = state.accumulator(state.first, name, param)
        u = state.accumulator(state.second, name, param)
        m[...] = beta1 * m + (1.0 - beta1) * grad
        u[...] = np.maximum(state.beta2 * u, np.abs(grad))
        ratio = np.divide(m, u, out=np.zeros_like(m), where=u > 0)
        param -= step_size * ratio
    return params


class Optimizer:
    """A configured update rule bound to its state."""

    def __init__(
        self,
        kind: OptimizerKind,
        lr: float,
        momentum: float = DEFAULT_BETA1,
        beta2: float = DEFAULT_BETA2,
        eps: float = DEFAULT_ADAM_EPS,
    ) -> None:
        """Initialize the optimizer."""
        self.kind = kind
        self.state = OptimizerState(lr=lr, momentum=momentum, beta2=beta2, eps=eps)

    def set_schedule(self, lr: float, momentum: float) -> None:
        """Apply a scheduled learning rate and momentum (beta1 for Adam and Adamax)."""
        enforce(lr >= 0, f"lr must be non-negative, got {lr}", ValueError)
        enforce(0.0 <= momentum < 1.0, f"momentum must be in [0, 1), got {momentum}", ValueError)
        self.state.lr = lr
        self.state.momentum = momentum

    def step(self, params: Params, grads: Grads) -> Params:
        """Update params in place."""
        if self.state.lr == 0.0:
            self.state.step += 1
            return params
        if self.kind is OptimizerKind.SGD:
            self.state.step += 1
            return sgd_step(params, grads, self.state.lr)
        if self.kind is OptimizerKind.MOMENTUM:
            return momentum_step(params, grads, self.state.lr, self.state.momentum, self.state)
        if self.kind is OptimizerKind.ADAM:
            return adam_step(params, grads, self.state)
        return adamax_step(params, grads, self.state)


def lr_schedule(epoch: int, total_epochs: int, base_lr: float) -> Tuple[float, float]:
    """
    Two-phase schedule.

    The first ceil(total_epochs / 2) epochs keep base_lr with momentum 0.9; the
    rest decay the learning rate linearly towards zero with momentum 0.5. A
    one-epoch run is therefore entirely first phase.

    :param epoch: zero-based epoch index.
    :param total_epochs: number of epochs in the run.
    :param base_lr: learning rate of the first phase.
    :return: (lr, momentum) for this epoch.
    """
    enforce(total_epochs >= 1, f"total_epochs must be >= 1, got {total_epochs}", ValueError)
    enforce(0 <= epoch < total_epochs, f"epoch {epoch} outside [0, {total_epochs})", ValueError)
    half = (total_epochs + 1) // 2
    if epoch < half:
        return base_lr, FIRST_PHASE_MOMENTUM
    remaining = total_epochs - half
    return base_lr * (total_epochs - epoch) / remaining, SECOND_PHASE_MOMENTUM


def default_ema_decay(steps_per_epoch: int) -> float:
    """Decay whose averaging window spans about ten epochs."""
    enforce(steps_per_epoch >= 1, f"steps_per_epoch must be >= 1, got {steps_per_epoch}", ValueError)
    return 1.0 - 1.0 / (EMA_WINDOW_EPOCHS * steps_per_epoch)


@dataclass
class EmaState:
    """Exponential moving average of the parameters."""

    decay: float
    shadow: Dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate the decay."""
        enforce(0.0 < self.decay < 1.0, f"decay must be in (0, 1), got {self.decay}", ValueError)

    @contextmanager
    def apply(self, params: Params) -> Generator[None, None, None]:
        """Temporarily swap the averaged values into params (in place)."""
        enforce(bool(self.shadow), "No averaged parameters yet", ValueError)
        saved = {name: params[name].copy() for name in self.shadow}
        try:
            for name, value in self.shadow.items():
                params[name][...] = value
            yield
        finally:
            for name, value in saved.items():
                params[name][...] = value


def ema_update(ema: EmaState, params: Mapping[str, Tensor]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * theta; the first call copies theta."""
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        if name not in ema.shadow:
            ema.shadow[name] = value.copy()
            continue
        shadow = ema.shadow[name]
        enforce(
            shadow.shape == value.shape,
            f"Parameter {name!r} changed shape from {shadow.shape} to {value.shape}",
            DimensionError,
        )
        shadow[...] = ema.decay * shadow + (1.0 - ema.decay) * value
    return ema

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

"""This module contains batch normalization, mean-only batch normalization and the data-dependent initialization."""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Protocol, Tuple

import numpy as np
from aea.exceptions import enforce

from packages.valory.weightnorm.exceptions import (
    BatchSizeError,
    ContractViolationError,
    DimensionError,
)
from packages.valory.weightnorm.numerics import Tensor, as_tensor, mean_std


DEFAULT_BN_EPS = 1e-6
DEFAULT_BN_MOMENTUM = 0.9
DEFAULT_INIT_EPS = 1e-8


class Mode(Enum):
    """Whether a pass uses minibatch statistics (train) or running ones (eval)."""

    TRAIN = "train"
    EVAL = "eval"


def _features(t: Tensor) -> Tuple[Tensor, Callable[[Tensor], Tensor]]:
    """
    View pre-activations as [rows x features].

    Convolutional [N x C x H x W] tensors put every spatial position of every
    example in its own row, so statistics are per channel.
    """
    if t.ndim == 2:
        return t, lambda flat: flat
    enforce(t.ndim == 4, f"Expected a 2-d or 4-d tensor, got {t.shape}", DimensionError)
    n, c, h, w = t.shape
    flat = t.transpose(0, 2, 3, 1).reshape(-1, c)
    return flat, lambda rows: rows.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def _ema(running: Optional[Tensor], batch: Tensor, momentum: float) -> Tensor:
    """Exponential moving average seeded with the first batch statistic."""
    if running is None:
        return batch.copy()
    return momentum * running + (1.0 - momentum) * batch


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of a batch normalization layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: Optional[Tensor] = None
    running_var: Optional[Tensor] = None
    momentum: float = DEFAULT_BN_MOMENTUM
    eps: float = DEFAULT_BN_EPS

    @classmethod
    def create(
        cls, features: int, momentum: float = DEFAULT_BN_MOMENTUM, eps: float = DEFAULT_BN_EPS
    ) -> "BatchNormState":
        """Identity-initialized state (gamma = 1, beta = 0)."""
        enforce(0.0 < momentum < 1.0, f"momentum must be in (0, 1), got {momentum}", ValueError)
        enforce(eps >= 0.0, f"eps must be non-negative, got {eps}", ValueError)
        return cls(gamma=np.ones(features), beta=np.zeros(features), momentum=momentum, eps=eps)


@dataclass
class MeanOnlyBNState:
    """Running mean of the pre-bias pre-activation t."""

    running_mean: Optional[Tensor] = None
    momentum: float = DEFAULT_BN_MOMENTUM


@dataclass(frozen=True)
class BatchNormCache:
    """What batchnorm_backward needs from the forward pass."""

    mode: Mode
    x_hat: Tensor
    inv_std: Tensor
    gamma: Tensor
    shape: Tuple[int, ...]


@dataclass(frozen=True)
class MeanOnlyCache:
    """Mode and shape of a mean-only forward pass."""

    mode: Mode
    shape: Tuple[int, ...]


@dataclass(frozen=True)
class InitReport:
    """Scales and biases assigned by the data-dependent initialization."""

    g_init: Tensor
    b_init: Tensor
    post_mean: Tensor
    post_std: Tensor


def batchnorm_forward(
    t: Tensor, state: BatchNormState, mode: Mode
) -> Tuple[Tensor, BatchNormCache]:
    """
    Normalize pre-activations by their mean and standard deviation.

    Train mode uses population minibatch statistics with eps inside the square
    root and updates the running statistics; eval mode uses the running ones.

    :param t: pre-activations, [batch x features] or [N x C x H x W].
    :param state: the layer state, updated in train mode.
    :param mode: train or eval.
    :return: gamma * t_hat + beta and the cache for the backward pass.
    """
    t = as_tensor(t)
    flat, restore = _features(t)
    enforce(
        flat.shape[1] == state.gamma.shape[0],
        f"Expected {state.gamma.shape[0]} features, got {flat.shape[1]}",
        DimensionError,
    )
    if mode is Mode.TRAIN:
        enforce(flat.shape[0] >= 2, f"Batch normalization needs >= 2 rows in train mode, got {flat.shape[0]}", BatchSizeError)
        mean, std = mean_std(flat, axis=0)
        var = np.square(std)
        state.running_mean = _ema(state.running_mean, mean, state.momentum)
        state.running_var = _ema(state.running_var, var, state.momentum)
    else:
        enforce(
            state.running_mean is not None and state.running_var is not None,
            "Eval-mode batch normalization requires running statistics",
            ContractViolationError,
        )
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (flat - mean) * inv_std
    out = state.gamma * x_hat + state.beta
    cache = BatchNormCache(mode=mode, x_hat=x_hat, inv_std=inv_std, gamma=state.gamma.copy(), shape=t.shape)
    return restore(out), cache


def batchnorm_backward(
    grad_out: Tensor, cache: BatchNormCache
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Exact gradients of the train-mode batch normalization expression.

    :param grad_out: gradient with respect to the normalized output.
    :param cache: cache of the matching train-mode forward call.
    :return: gradients with respect to t, gamma and beta.
    """
    enforce(cache.mode is Mode.TRAIN, "batchnorm_backward needs a train-mode cache", ContractViolationError)
    grad_out = as_tensor(grad_out)
    enforce(grad_out.shape == cache.shape, f"Gradient shape {grad_out.shape} != {cache.shape}", DimensionError)
    flat, restore = _features(grad_out)
    grad_gamma = np.sum(flat * cache.x_hat, axis=0)
    grad_beta = np.sum(flat, axis=0)
    grad_x_hat = flat * cache.gamma
    grad_t = cache.inv_std * (
        grad_x_hat
        - grad_x_hat.mean(axis=0)
        - cache.x_hat * np.mean(grad_x_hat * cache.x_hat, axis=0)
    )
    return restore(grad_t), grad_gamma, grad_beta


def batchnorm_backward_frozen(
    grad_out: Tensor, cache: BatchNormCache
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Gradients of an eval-mode batch normalization, treating the running statistics as constants.

    :param grad_out: gradient with respect to the normalized output.
    :param cache: cache of the matching eval-mode forward call.
    :return: gradients with respect to t, gamma and beta.
    """
    enforce(cache.mode is Mode.EVAL, "batchnorm_backward_frozen needs an eval-mode cache", ContractViolationError)
    grad_out = as_tensor(grad_out)
    enforce(grad_out.shape == cache.shape, f"Gradient shape {grad_out.shape} != {cache.shape}", DimensionError)
    flat, restore = _features(grad_out)
    return restore(flat * cache.gamma * cache.inv_std), np.sum(flat * cache.x_hat, axis=0), np.sum(flat, axis=0)


def meanonly_forward(
    t: Tensor, b: Tensor, state: MeanOnlyBNState, mode: Mode
) -> Tuple[Tensor, MeanOnlyCache]:
    """
    Subtract the minibatch mean (train) or the running mean (eval) and add the bias.

    The running mean is the mean of t before the bias is added.
    """
    t, b = as_tensor(t), as_tensor(b)
    flat, restore = _features(t)
    enforce(b.shape == (flat.shape[1],), f"Bias shape {b.shape} does not match {flat.shape[1]} features", DimensionError)
    if mode is Mode.TRAIN:
        enforce(flat.shape[0] >= 1, "Empty batch", BatchSizeError)
        mean = flat.mean(axis=0)
        state.running_mean = _ema(state.running_mean, mean, state.momentum)
    else:
        enforce(state.running_mean is not None, "Eval-mode mean-only normalization requires a running mean", ContractViolationError)
        mean = state.running_mean
    return restore(flat - mean + b), MeanOnlyCache(mode=mode, shape=t.shape)


def meanonly_backward(
    grad_tilde: Tensor, cache: Optional[MeanOnlyCache] = None
) -> Tuple[Tensor, Tensor]:
    """
    Centre the backpropagated gradient.

    :param grad_tilde: gradient with respect to the mean-only output.
    :param cache: optional cache of the forward pass; must be from train mode.
    :return: grad_tilde minus its column mean, and the column sum as the bias gradient.
    """
    if cache is not None:
        enforce(cache.mode is Mode.TRAIN, "meanonly_backward needs a train-mode cache", ContractViolationError)
    grad_tilde = as_tensor(grad_tilde)
    flat, restore = _features(grad_tilde)
    return restore(flat - flat.mean(axis=0)), flat.sum(axis=0)


def meanonly_backward_frozen(grad_tilde: Tensor, cache: MeanOnlyCache) -> Tuple[Tensor, Tensor]:
    """Eval-mode mean-only normalization is a shift: the gradient passes through unchanged."""
    enforce(cache.mode is Mode.EVAL, "meanonly_backward_frozen needs an eval-mode cache", ContractViolationError)
    grad_tilde = as_tensor(grad_tilde)
    enforce(grad_tilde.shape == cache.shape, f"Gradient shape {grad_tilde.shape} != {cache.shape}", DimensionError)
    flat, _ = _features(grad_tilde)
    return grad_tilde.copy(), flat.sum(axis=0)


class InitializableLayer(Protocol):
    """A weight-normalized layer the data-dependent initialization can drive."""

    def direction_preactivation(self, x: Tensor) -> Tensor:
        """Return t = v . x / ||v|| as [rows x units]."""

    def assign_scale_and_bias(self, g: Tensor, b: Tensor) -> None:
        """Overwrite the layer's g and b."""


def data_dependent_init(
    layer: InitializableLayer, x_batch: Tensor, eps: float = DEFAULT_INIT_EPS
) -> InitReport:
    """
    Set g and b so the layer's pre-activations have zero mean and unit variance on x_batch.

    :param layer: a weight-normalized layer.
    :param x_batch: the layer's input on the initialization minibatch.
    :param eps: added to the standard deviation in both denominators.
    :return: the assigned values and the resulting pre-activation statistics.
    """
    x_batch = as_tensor(x_batch)
    enforce(x_batch.shape[0] >= 2, f"Initialization needs a batch of >= 2, got {x_batch.shape[0]}", BatchSizeError)
    t = layer.direction_preactivation(x_batch)
    mu, sigma = mean_std(t, axis=0)
    g = 1.0 / (sigma + eps)
    b = -mu / (sigma + eps)
    layer.assign_scale_and_bias(g, b)
    post_mean, post_std = mean_std(g * t + b, axis=0)
    return InitReport(g_init=g, b_init=b, post_mean=post_mean, post_std=post_std)

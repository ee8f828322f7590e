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
This module contains the layer graph and its exact backpropagation.

Every weight layer (dense or conv) runs compose_weight -> affine map ->
normalization per NormMode -> activation. The five parameterizations differ only
in how the weight is stored and which normalization follows the affine map.
"""

from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Generator, List, Optional, Sequence, Tuple

import numpy as np
from aea.exceptions import enforce

from packages.valory.weightnorm.exceptions import (
    BuildError,
    ContractViolationError,
    DimensionError,
)
from packages.valory.weightnorm.normalization import (
    DEFAULT_BN_EPS,
    DEFAULT_BN_MOMENTUM,
    DEFAULT_INIT_EPS,
    BatchNormState,
    InitReport,
    MeanOnlyBNState,
    Mode,
    batchnorm_backward,
    batchnorm_backward_frozen,
    batchnorm_forward,
    data_dependent_init,
    meanonly_backward,
    meanonly_backward_frozen,
    meanonly_forward,
)
from packages.valory.weightnorm.numerics import (
    RngStream,
    Tensor,
    as_tensor,
    conv2d,
    conv2d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    matmul,
    max_pool2d,
    max_pool2d_backward,
    sample_normal,
)
from packages.valory.weightnorm.weightnorm import (
    WeightNormParam,
    collapse,
    compose_weight,
    grad_g,
    grad_s,
    grad_v,
)


INIT_STD = 0.05
DEFAULT_LEAKY_SLOPE = 0.1

Shape = Tuple[Optional[int], ...]


class NormMode(Enum):
    """The five parameterizations a weight layer can use."""

    STANDARD = "standard"
    BATCH_NORM = "batchnorm"
    WEIGHT_NORM = "weightnorm"
    WEIGHT_NORM_MEAN_ONLY = "weightnorm_meanonly"
    MEAN_ONLY = "meanonly"

    @property
    def weight_normalized(self) -> bool:
        """Whether the weight is stored as (v, g)."""
        return self in (NormMode.WEIGHT_NORM, NormMode.WEIGHT_NORM_MEAN_ONLY)

    @property
    def mean_only(self) -> bool:
        """Whether mean-only batch normalization follows the affine map."""
        return self in (NormMode.WEIGHT_NORM_MEAN_ONLY, NormMode.MEAN_ONLY)


class LayerKind(Enum):
    """Layer kinds."""

    DENSE = "dense"
    CONV2D = "conv2d"
    ACTIVATION = "activation"
    POOL = "pool"
    NOISE = "noise"


class Activation(Enum):
    """Elementwise nonlinearities; softmax is applied by the loss."""

    IDENTITY = "identity"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    SOFTMAX = "softmax"


class PoolKind(Enum):
    """Pooling variants."""

    MAX = "max"
    GLOBAL_AVG = "global_avg"


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer."""

    kind: LayerKind
    fan_in: int = 0
    fan_out: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    norm_mode: NormMode = NormMode.WEIGHT_NORM
    activation: Activation = Activation.IDENTITY
    slope: float = DEFAULT_LEAKY_SLOPE
    pool: PoolKind = PoolKind.MAX
    pool_size: int = 2
    sigma: float = 0.0
    log_scale: bool = False

    @classmethod
    def dense(
        cls,
        fan_in: int,
        fan_out: int,
        activation: Activation = Activation.IDENTITY,
        norm_mode: NormMode = NormMode.WEIGHT_NORM,
        **kwargs: Any,
    ) -> "LayerSpec":
        """Dense layer."""
        return cls(LayerKind.DENSE, fan_in=fan_in, fan_out=fan_out, activation=activation, norm_mode=norm_mode, **kwargs)

    @classmethod
    def conv(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        activation: Activation = Activation.LEAKY_RELU,
        norm_mode: NormMode = NormMode.WEIGHT_NORM,
        **kwargs: Any,
    ) -> "LayerSpec":
        """Convolutional layer."""
        return cls(
            LayerKind.CONV2D,
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=kernel,
            activation=activation,
            norm_mode=norm_mode,
            **kwargs,
        )

    @property
    def has_weights(self) -> bool:
        """Whether the layer owns a weight tensor."""
        return self.kind in (LayerKind.DENSE, LayerKind.CONV2D)

    def with_mode(self, norm_mode: NormMode, log_scale: Optional[bool] = None) -> "LayerSpec":
        """Same layer under another parameterization (weight layers only)."""
        if not self.has_weights:
            return self
        return replace(self, norm_mode=norm_mode, log_scale=self.log_scale if log_scale is None else log_scale)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly representation."""
        return {key: value.value if isinstance(value, Enum) else value for key, value in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        """Inverse of to_dict; unknown keys raise BuildError."""
        data = dict(data)
        enums = {
            "kind": LayerKind,
            "norm_mode": NormMode,
            "activation": Activation,
            "pool": PoolKind,
        }
        try:
            for key, enum_cls in enums.items():
                if key in data:
                    data[key] = enum_cls(data[key])
            return cls(**data)
        except (TypeError, ValueError) as e:
            raise BuildError(f"Invalid layer specification {data}: {e}") from e


def relu(t: Tensor) -> Tensor:
    """Rectifier max(t, 0)."""
    return leaky_relu(t, 0.0)


def leaky_relu(t: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Elementwise max(t, slope * t) for slope in [0, 1)."""
    t = as_tensor(t)
    return np.where(t > 0, t, slope * t)


def relu_backward(grad: Tensor, t: Tensor) -> Tensor:
    """Rectifier gradient; the subgradient at 0 is 0."""
    return leaky_relu_backward(grad, t, 0.0)


def leaky_relu_backward(grad: Tensor, t: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Leaky rectifier gradient; the subgradient at 0 takes the negative-side slope."""
    return np.where(as_tensor(t) > 0, grad, slope * grad)


def gaussian_noise_layer(t: Tensor, sigma: float, rng: RngStream, mode: Mode) -> Tensor:
    """Add N(0, sigma^2) noise in train mode; identity in eval mode."""
    enforce(sigma >= 0, f"sigma must be non-negative, got {sigma}", ValueError)
    t = as_tensor(t)
    if mode is Mode.EVAL or sigma == 0.0:
        return t.copy()
    return t + sample_normal(rng, t.shape, 0.0, sigma)


def softmax_xent(logits: Tensor, labels: Sequence[int]) -> Tuple[float, Tensor]:
    """
    Mean softmax cross-entropy and its gradient with respect to the logits.

    :param logits: [batch x classes] scores.
    :param labels: class index per example.
    :return: the loss and (softmax - onehot) / batch.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    enforce(logits.ndim == 2, f"logits must be [batch x classes], got {logits.shape}", DimensionError)
    enforce(labels.shape == (logits.shape[0],), f"Expected {logits.shape[0]} labels, got {labels.shape}", DimensionError)
    classes = logits.shape[1]
    enforce(
        bool(np.all((labels >= 0) & (labels < classes))),
        f"Labels must lie in [0, {classes})",
        ValueError,
    )
    rows = np.arange(logits.shape[0])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / logits.shape[0]


def _activate(t: Tensor, spec: LayerSpec) -> Tensor:
    """Apply the layer's nonlinearity."""
    if spec.activation is Activation.RELU:
        return relu(t)
    if spec.activation is Activation.LEAKY_RELU:
        return leaky_relu(t, spec.slope)
    return t


def _activate_backward(grad: Tensor, t: Tensor, spec: LayerSpec) -> Tensor:
    """Backpropagate through the layer's nonlinearity."""
    if spec.activation is Activation.RELU:
        return relu_backward(grad, t)
    if spec.activation is Activation.LEAKY_RELU:
        return leaky_relu_backward(grad, t, spec.slope)
    return grad


def _is_rectifier(spec: LayerSpec) -> bool:
    """Whether the activation has a kink at zero."""
    return spec.activation in (Activation.RELU, Activation.LEAKY_RELU)


@dataclass
class LayerCache:
    """Per-layer values retained by the forward pass."""

    x_shape: Tuple[int, ...]
    x: Optional[Tensor] = None
    preactivation: Optional[Tensor] = None
    weight: Optional[Tensor] = None
    norm_cache: Any = None
    argmax: Optional[Tensor] = None
    decisions: Optional[Tensor] = None


class Layer(ABC):
    """A layer of the graph."""

    def __init__(self, spec: LayerSpec) -> None:
        """Initialize the layer."""
        self.spec = spec

    @abstractmethod
    def forward(self, x: Tensor, mode: Mode, rng: RngStream) -> Tuple[Tensor, LayerCache]:
        """Run the layer."""

    @abstractmethod
    def backward(self, grad_y: Tensor, cache: LayerCache) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Return the input gradient and the gradient of every local parameter."""

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable arrays, by local name; updated in place by optimizers."""
        return {}

    def buffers(self) -> Dict[str, Tensor]:
        """Non-trainable state (running statistics)."""
        return {}

    def load_buffers(self, buffers: Dict[str, Tensor]) -> None:
        """Restore non-trainable state."""

    def refresh(self) -> None:
        """Recompute derived values after an update."""


class WeightLayer(Layer):
    """Dense or convolutional layer under one of the five parameterizations."""

    def __init__(
        self,
        spec: LayerSpec,
        param: Optional[WeightNormParam] = None,
        w: Optional[Tensor] = None,
        b: Optional[Tensor] = None,
        bn: Optional[BatchNormState] = None,
        meanonly: Optional[MeanOnlyBNState] = None,
    ) -> None:
        """Initialize the layer from already-built parameter records."""
        super().__init__(spec)
        self.param = param
        self.w = w
        self.b = b
        self.bn = bn
        self.meanonly = meanonly

    @property
    def mode(self) -> NormMode:
        """The layer's parameterization."""
        return self.spec.norm_mode

    @property
    def units(self) -> int:
        """Number of output units (filters for conv)."""
        return self.spec.fan_out if self.spec.kind is LayerKind.DENSE else self.spec.out_channels

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        """Shape of the weight tensor."""
        if self.spec.kind is LayerKind.DENSE:
            return (self.spec.fan_out, self.spec.fan_in)
        return (self.spec.out_channels, self.spec.in_channels, self.spec.kernel, self.spec.kernel)

    def effective_weight(self) -> Tensor:
        """The weight w the affine map uses."""
        if self.param is not None:
            return compose_weight(self.param).w
        return self.w

    def _affine(self, x: Tensor, w: Tensor) -> Tensor:
        """w . x without bias."""
        if self.spec.kind is LayerKind.DENSE:
            flat = x.reshape(x.shape[0], -1)
            enforce(
                flat.shape[1] == self.spec.fan_in,
                f"Dense layer expects {self.spec.fan_in} inputs, got {flat.shape[1]}",
                DimensionError,
            )
            return matmul(flat, w.T)
        return conv2d(x, w, self.spec.stride, self.spec.pad)

    def _add_bias(self, t: Tensor) -> Tensor:
        """Add the per-unit bias."""
        if self.spec.kind is LayerKind.DENSE:
            return t + self.b
        return t + self.b[None, :, None, None]

    def forward(self, x: Tensor, mode: Mode, rng: RngStream) -> Tuple[Tensor, LayerCache]:
        """compose_weight -> affine -> normalization -> activation."""
        w = self.effective_weight()
        t = self._affine(x, w)
        norm_cache: Any = None
        if self.bn is not None:
            t, norm_cache = batchnorm_forward(t, self.bn, mode)
        elif self.meanonly is not None:
            t, norm_cache = meanonly_forward(t, self.b, self.meanonly, mode)
        else:
            t = self._add_bias(t)
        cache = LayerCache(
            x_shape=x.shape,
            x=x,
            preactivation=t,
            weight=w,
            norm_cache=norm_cache,
            decisions=t > 0 if _is_rectifier(self.spec) else None,
        )
        return _activate(t, self.spec), cache

    def backward(self, grad_y: Tensor, cache: LayerCache) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Backpropagate; the 'weight' entry is the effective-weight gradient."""
        grad_t = _activate_backward(grad_y, cache.preactivation, self.spec)
        grads: Dict[str, Tensor] = {}
        frozen = cache.norm_cache is not None and cache.norm_cache.mode is Mode.EVAL
        if self.bn is not None and frozen:
            grad_t, grads["gamma"], grads["beta"] = batchnorm_backward_frozen(grad_t, cache.norm_cache)
        elif self.bn is not None:
            grad_t, grads["gamma"], grads["beta"] = batchnorm_backward(grad_t, cache.norm_cache)
        elif self.meanonly is not None and frozen:
            grad_t, grads["b"] = meanonly_backward_frozen(grad_t, cache.norm_cache)
        elif self.meanonly is not None:
            grad_t, grads["b"] = meanonly_backward(grad_t, cache.norm_cache)
        else:
            grads["b"] = grad_t.sum(axis=0) if grad_t.ndim == 2 else grad_t.sum(axis=(0, 2, 3))
        if self.spec.kind is LayerKind.DENSE:
            flat = cache.x.reshape(cache.x.shape[0], -1)
            grad_w = grad_t.T @ flat
            grad_x = (grad_t @ cache.weight).reshape(cache.x_shape)
        else:
            grad_x, grad_w = conv2d_backward(grad_t, cache.x, cache.weight, self.spec.stride, self.spec.pad)
        grads["weight"] = grad_w
        if self.param is not None:
            gradient_g = grad_g(grad_w, self.param)
            grads["v"] = grad_v(grad_w, self.param)
            if self.param.log_scale:
                grads["s"] = grad_s(gradient_g, self.param.g)
            else:
                grads["g"] = gradient_g
        else:
            grads["w"] = grad_w
        return grad_x, grads

    def parameters(self) -> Dict[str, Tensor]:
        """v and g (or s) for weight-normalized layers, w otherwise; then b, gamma, beta."""
        params: Dict[str, Tensor] = {}
        if self.param is not None:
            params["v"] = self.param.v
            if self.param.log_scale:
                params["s"] = self.param.s
            else:
                params["g"] = self.param.g
        else:
            params["w"] = self.w
        if self.b is not None:
            params["b"] = self.b
        if self.bn is not None:
            params["gamma"] = self.bn.gamma
            params["beta"] = self.bn.beta
        return params

    def buffers(self) -> Dict[str, Tensor]:
        """Running statistics that exist so far."""
        buffers: Dict[str, Tensor] = {}
        if self.bn is not None and self.bn.running_mean is not None:
            buffers["running_mean"] = self.bn.running_mean
            buffers["running_var"] = self.bn.running_var
        if self.meanonly is not None and self.meanonly.running_mean is not None:
            buffers["running_mean"] = self.meanonly.running_mean
        return buffers

    def load_buffers(self, buffers: Dict[str, Tensor]) -> None:
        """Restore running statistics."""
        if self.bn is not None and "running_mean" in buffers:
            self.bn.running_mean = buffers["running_mean"].copy()
            self.bn.running_var = buffers["running_var"].copy()
        if self.meanonly is not None and "running_mean" in buffers:
            self.meanonly.running_mean = buffers["running_mean"].copy()

    def refresh(self) -> None:
        """Recompute the cached ||v||."""
        if self.param is not None:
            self.param.refresh()

    def direction_preactivation(self, x: Tensor) -> Tensor:
        """t = v . x / ||v|| as [rows x units]; conv positions become rows."""
        enforce(self.param is not None, "Initialization needs a weight-normalized layer", ContractViolationError)
        direction = self.param.v / self.param.norm_v.reshape((-1,) + (1,) * (self.param.v.ndim - 1))
        t = self._affine(as_tensor(x), direction)
        if t.ndim == 4:
            return t.transpose(0, 2, 3, 1).reshape(-1, t.shape[1])
        return t

    def assign_scale_and_bias(self, g: Tensor, b: Tensor) -> None:
        """Overwrite g (or s = log g) and b in place."""
        enforce(self.param is not None and self.b is not None, "Initialization needs g and b", ContractViolationError)
        if self.param.log_scale:
            self.param.s[...] = np.log(g)
        else:
            self.param.g[...] = g
        self.b[...] = b
        self.param.refresh()

    def converted(
        self, norm_mode: NormMode, log_scale: bool = False, bn_eps: float = DEFAULT_BN_EPS, bn_momentum: float = DEFAULT_BN_MOMENTUM
    ) -> "WeightLayer":
        """
        A copy of this weight-normalized layer under another parameterization.

        Standard layers take w = g v / ||v||; batch-normalized layers drop b since
        beta replaces it.
        """
        enforce(self.param is not None and self.b is not None, "Only initialized weight-normalized layers convert", ContractViolationError)
        spec = self.spec.with_mode(norm_mode, log_scale)
        param, w = None, None
        if norm_mode.weight_normalized:
            param = WeightNormParam.create(self.param.v, self.param.g, log_scale=log_scale)
        else:
            w = collapse(self.param)
        return WeightLayer(
            spec,
            param=param,
            w=w,
            b=None if norm_mode is NormMode.BATCH_NORM else self.b.copy(),
            bn=BatchNormState.create(self.units, bn_momentum, bn_eps) if norm_mode is NormMode.BATCH_NORM else None,
            meanonly=MeanOnlyBNState(momentum=bn_momentum) if norm_mode.mean_only else None,
        )


class ActivationLayer(Layer):
    """Standalone nonlinearity."""

    def forward(self, x: Tensor, mode: Mode, rng: RngStream) -> Tuple[Tensor, LayerCache]:
        """Apply the activation."""
        decisions = x > 0 if _is_rectifier(self.spec) else None
        return _activate(x, self.spec), LayerCache(x_shape=x.shape, preactivation=x, decisions=decisions)

    def backward(self, grad_y: Tensor, cache: LayerCache) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Backpropagate through the activation."""
        return _activate_backward(grad_y, cache.preactivation, self.spec), {}


class PoolLayer(Layer):
    """2x2 (or size x size) max pooling, or global average pooling."""

    def forward(self, x: Tensor, mode: Mode, rng: RngStream) -> Tuple[Tensor, LayerCache]:
        """Pool."""
        if self.spec.pool is PoolKind.GLOBAL_AVG:
            return global_avg_pool(x), LayerCache(x_shape=x.shape)
        pooled, argmax = max_pool2d(x, self.spec.pool_size)
        return pooled, LayerCache(x_shape=x.shape, argmax=argmax, decisions=argmax)

    def backward(self, grad_y: Tensor, cache: LayerCache) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Route the gradient back."""
        if self.spec.pool is PoolKind.GLOBAL_AVG:
            return global_avg_pool_backward(grad_y, cache.x_shape), {}
        return max_pool2d_backward(grad_y, cache.argmax, cache.x_shape, self.spec.pool_size), {}


class NoiseLayer(Layer):
    """Additive Gaussian noise, active in train mode only."""

    def forward(self, x: Tensor, mode: Mode, rng: RngStream) -> Tuple[Tensor, LayerCache]:
        """Add noise."""
        return gaussian_noise_layer(x, self.spec.sigma, rng, mode), LayerCache(x_shape=x.shape)

    def backward(self, grad_y: Tensor, cache: LayerCache) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Additive noise passes the gradient through."""
        return grad_y, {}


@dataclass
class ForwardCache:
    """Everything backward needs, stamped with the model version it came from."""

    version: int
    mode: Mode
    layers: List[LayerCache] = field(default_factory=list)

    def decision_pattern(self) -> List[Tensor]:
        """Rectifier signs and pooling choices, used to detect kinks."""
        return [cache.decisions for cache in self.layers if cache.decisions is not None]

    def preactivations(self) -> List[Tensor]:
        """Normalized pre-activations of every weight layer, in order."""
        return [cache.preactivation for cache in self.layers if cache.weight is not None]


@dataclass
class ModelState:
    """Ordered layers plus the random stream the noise layers draw from."""

    layers: List[Layer]
    rng: RngStream
    input_shape: Tuple[int, ...]
    version: int = 0

    def parameters(self) -> Dict[str, Tensor]:
        """Every trainable array, keyed '<layer index>.<name>'."""
        return {
            f"{index}.{name}": value
            for index, layer in enumerate(self.layers)
            for name, value in layer.parameters().items()
        }

    def buffers(self) -> Dict[str, Tensor]:
        """Every running statistic, keyed '<layer index>.<name>'."""
        return {
            f"{index}.{name}": value
            for index, layer in enumerate(self.layers)
            for name, value in layer.buffers().items()
        }

    def parameter_count(self) -> int:
        """Number of trainable scalars."""
        return int(sum(value.size for value in self.parameters().values()))

    @property
    def weight_layers(self) -> List[Tuple[int, WeightLayer]]:
        """(index, layer) of every dense/conv layer."""
        return [(i, layer) for i, layer in enumerate(self.layers) if isinstance(layer, WeightLayer)]

    def refresh(self) -> None:
        """Recompute ||v|| caches after an update; older forward caches become stale."""
        for layer in self.layers:
            layer.refresh()
        self.version += 1

    def specs(self) -> List[LayerSpec]:
        """The layer specifications."""
        return [layer.spec for layer in self.layers]


def _infer_shape(spec: LayerSpec, current: Optional[Shape]) -> Shape:
    """Output shape of a layer given its input shape (None where unknown)."""
    if spec.kind is LayerKind.DENSE:
        enforce(spec.fan_in > 0 and spec.fan_out > 0, f"Dense layer needs positive fan_in/fan_out: {spec}", BuildError)
        if current is not None and None not in current:
            enforce(
                int(np.prod(current)) == spec.fan_in,
                f"Dense layer expects {spec.fan_in} inputs but receives shape {current}",
                BuildError,
            )
        return (spec.fan_out,)
    if spec.kind is LayerKind.CONV2D:
        enforce(
            spec.in_channels > 0 and spec.out_channels > 0 and spec.kernel > 0 and spec.stride >= 1 and spec.pad >= 0,
            f"Invalid conv geometry: {spec}",
            BuildError,
        )
        if current is None:
            return (spec.out_channels, None, None)
        enforce(
            len(current) == 3 and current[0] == spec.in_channels,
            f"Conv layer expects {spec.in_channels} input channels but receives shape {current}",
            BuildError,
        )
        spatial = []
        for size in current[1:]:
            if size is None:
                spatial.append(None)
                continue
            out = (size + 2 * spec.pad - spec.kernel) // spec.stride + 1
            enforce(out >= 1, f"Conv output would be empty for input {current}", BuildError)
            spatial.append(out)
        return (spec.out_channels, *spatial)
    if spec.kind is LayerKind.POOL:
        enforce(current is None or len(current) == 3, f"Pooling expects a C x H x W input, got {current}", BuildError)
        if spec.pool is PoolKind.GLOBAL_AVG:
            return (None if current is None else current[0],)
        if current is None:
            return (None, None, None)
        enforce(spec.pool_size >= 1, "pool_size must be positive", BuildError)
        spatial = [None if size is None else size // spec.pool_size for size in current[1:]]
        enforce(all(size is None or size >= 1 for size in spatial), f"Pooling would empty shape {current}", BuildError)
        return (current[0], *spatial)
    if spec.kind is LayerKind.NOISE:
        enforce(spec.sigma >= 0, "Noise sigma must be non-negative", BuildError)
    return current


def _first_input_shape(spec: LayerSpec) -> Optional[Shape]:
    """Input shape implied by the first layer when none is given."""
    if spec.kind is LayerKind.DENSE:
        return (spec.fan_in,)
    if spec.kind is LayerKind.CONV2D:
        return (spec.in_channels, None, None)
    return None


def build_model(
    specs: Sequence[LayerSpec],
    rng: RngStream,
    input_shape: Optional[Sequence[int]] = None,
    bn_eps: float = DEFAULT_BN_EPS,
    bn_momentum: float = DEFAULT_BN_MOMENTUM,
) -> ModelState:
    """
    Build a model with weights sampled from N(0, 0.05^2), g = 1 and b = 0.

    :param specs: layer specifications, in order.
    :param rng: stream the weights are drawn from; the model keeps it for noise layers.
    :param input_shape: per-example input shape; inferred from the first layer if omitted.
    :param bn_eps: eps of batch-normalized layers.
    :param bn_momentum: running-statistics momentum of normalized layers.
    :return: the model.
    """
    enforce(len(specs) > 0, "Cannot build a model from an empty layer list", BuildError)
    current: Optional[Shape] = tuple(input_shape) if input_shape is not None else _first_input_shape(specs[0])
    enforce(current is not None, "The input shape cannot be inferred; pass input_shape", BuildError)
    resolved_input = current
    layers: List[Layer] = []
    for spec in specs:
        current = _infer_shape(spec, current)
        if spec.kind is LayerKind.ACTIVATION:
            layers.append(ActivationLayer(spec))
        elif spec.kind is LayerKind.POOL:
            layers.append(PoolLayer(spec))
        elif spec.kind is LayerKind.NOISE:
            layers.append(NoiseLayer(spec))
        else:
            layers.append(_build_weight_layer(spec, rng, bn_eps, bn_momentum))
    return ModelState(layers=layers, rng=rng, input_shape=tuple(resolved_input))


def _build_weight_layer(spec: LayerSpec, rng: RngStream, bn_eps: float, bn_momentum: float) -> WeightLayer:
    """Sample the weights of one dense/conv layer."""
    units = spec.fan_out if spec.kind is LayerKind.DENSE else spec.out_channels
    shape = (spec.fan_out, spec.fan_in) if spec.kind is LayerKind.DENSE else (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    sampled = sample_normal(rng, shape, 0.0, INIT_STD)
    mode = spec.norm_mode
    param = WeightNormParam.create(sampled, np.ones(units), log_scale=spec.log_scale) if mode.weight_normalized else None
    return WeightLayer(
        spec,
        param=param,
        w=None if mode.weight_normalized else sampled,
        b=None if mode is NormMode.BATCH_NORM else np.zeros(units),
        bn=BatchNormState.create(units, bn_momentum, bn_eps) if mode is NormMode.BATCH_NORM else None,
        meanonly=MeanOnlyBNState(momentum=bn_momentum) if mode.mean_only else None,
    )


def _prepare_input(model: ModelState, x: Tensor) -> Tensor:
    """Reshape flat examples to the model's input shape."""
    x = as_tensor(x)
    expected = model.input_shape
    if None in expected or x.shape[1:] == expected:
        return x
    enforce(
        int(np.prod(x.shape[1:])) == int(np.prod(expected)),
        f"Input shape {x.shape[1:]} does not match model input {expected}",
        DimensionError,
    )
    return x.reshape((x.shape[0], *expected))


def forward(model: ModelState, x: Tensor, mode: Mode) -> Tuple[ForwardCache, Tensor]:
    """
    Run every layer in order.

    :param model: the model.
    :param x: a batch of inputs.
    :param mode: train (minibatch statistics, noise on) or eval.
    :return: the cache for backward and the logits.
    """
    h = _prepare_input(model, x)
    cache = ForwardCache(version=model.version, mode=mode)
    for layer in model.layers:
        h, layer_cache = layer.forward(h, mode, model.rng)
        cache.layers.append(layer_cache)
    return cache, h


def backward(
    model: ModelState,
    cache: ForwardCache,
    grad_logits: Tensor,
    weight_grads: bool = False,
    frozen_statistics: bool = False,
) -> Dict[str, Tensor]:
    """
    Gradients of every trainable parameter.

    :param model: the model the cache was produced by.
    :param cache: cache of a forward pass on the current parameters; train mode unless frozen_statistics.
    :param grad_logits: gradient of the loss with respect to the logits.
    :param weight_grads: also return '<index>.weight', the gradient with respect to the effective weight.
    :param frozen_statistics: accept an eval-mode cache; normalization layers then backpropagate through
        their running statistics as constants.
    :return: gradients keyed like ModelState.parameters().
    """
    enforce(
        cache.mode is Mode.TRAIN or frozen_statistics,
        "backward needs a train-mode forward cache unless statistics are frozen",
        ContractViolationError,
    )
    enforce(
        cache.version == model.version and len(cache.layers) == len(model.layers),
        "Stale forward cache: parameters changed since the forward pass",
        ContractViolationError,
    )
    grads: Dict[str, Tensor] = {}
    grad = as_tensor(grad_logits)
    for index in reversed(range(len(model.layers))):
        grad, local = model.layers[index].backward(grad, cache.layers[index])
        for name, value in local.items():
            if name == "weight" and not weight_grads:
                continue
            grads[f"{index}.{name}"] = value
    return grads


def initialize_model(model: ModelState, x_batch: Tensor, eps: float = DEFAULT_INIT_EPS) -> List[InitReport]:
    """
    Data-dependent initialization in a single feedforward pass.

    Each weight layer is initialized on the output of the already-initialized
    layers before it. Noise layers are inactive during the pass.
    """
    h = _prepare_input(model, x_batch)
    reports = []
    for layer in model.layers:
        if isinstance(layer, WeightLayer):
            reports.append(data_dependent_init(layer, h, eps))
        h, _ = layer.forward(h, Mode.EVAL, model.rng)
    model.refresh()
    return reports


def convert_model(
    template: ModelState,
    norm_mode: NormMode,
    log_scale: bool = False,
    bn_eps: float = DEFAULT_BN_EPS,
    bn_momentum: float = DEFAULT_BN_MOMENTUM,
    rng: Optional[RngStream] = None,
) -> ModelState:
    """Copy an initialized weight-normalized model into another parameterization."""
    layers: List[Layer] = []
    for layer in template.layers:
        if isinstance(layer, WeightLayer):
            layers.append(layer.converted(norm_mode, log_scale, bn_eps, bn_momentum))
        else:
            layers.append(layer)
    return ModelState(layers=layers, rng=rng if rng is not None else template.rng.copy(), input_shape=template.input_shape)


def build_initialized(
    specs: Sequence[LayerSpec],
    rng: RngStream,
    x_init: Tensor,
    input_shape: Optional[Sequence[int]] = None,
    init_eps: float = DEFAULT_INIT_EPS,
) -> Tuple[ModelState, List[InitReport]]:
    """
    Build the shared weight-normalized template and initialize it on x_init.

    Every parameterization is later derived from this template with
    convert_model, so all of them start from the same effective weights.
    """
    template_specs = [spec.with_mode(NormMode.WEIGHT_NORM, log_scale=False) for spec in specs]
    template = build_model(template_specs, rng, input_shape)
    reports = initialize_model(template, x_init, init_eps)
    return template, reports


@contextmanager
def probe(model: ModelState) -> Generator[ModelState, None, None]:
    """Run passes on the model, then restore its random stream position and running statistics."""
    counter = model.rng.counter
    saved = {index: {name: value.copy() for name, value in layer.buffers().items()} for index, layer in enumerate(model.layers)}
    try:
        yield model
    finally:
        model.rng.counter = counter
        for index, layer in enumerate(model.layers):
            if saved[index]:
                layer.load_buffers(saved[index])
            elif isinstance(layer, WeightLayer):
                if layer.bn is not None:
                    layer.bn.running_mean, layer.bn.running_var = None, None
                if layer.meanonly is not None:
                    layer.meanonly.running_mean = None


def kink_signature(model: ModelState, x: Tensor, mode: Mode = Mode.TRAIN) -> List[Tensor]:
    """Rectifier signs and pooling choices of a side-effect-free forward pass on x."""
    with probe(model):
        cache, _ = forward(model, x, mode)
    return cache.decision_pattern()


ARCHITECTURES = ("mlp", "mlp-small", "small-conv", "convpool-cnn-c")


def named_architecture(
    name: str,
    norm_mode: NormMode = NormMode.WEIGHT_NORM,
    input_shape: Optional[Sequence[int]] = None,
    classes: int = 10,
    log_scale: bool = False,
) -> Tuple[List[LayerSpec], Tuple[int, ...]]:
    """
    Layer specifications of a shipped architecture.

    :param name: one of ARCHITECTURES.
    :param norm_mode: parameterization of every weight layer, output layer included.
    :param input_shape: per-example input shape; defaults to 784 for MLPs, (1, 28, 28)
        for small-conv and (3, 32, 32) for convpool-cnn-c.
    :param classes: number of output classes.
    :param log_scale: store g as exp(s) in weight-normalized layers.
    :return: the specifications and the input shape.
    """
    common = {"norm_mode": norm_mode, "log_scale": log_scale}
    if name in ("mlp", "mlp-small"):
        shape = tuple(input_shape) if input_shape is not None else (784,)
        inputs = int(np.prod(shape))
        hidden = 128 if name == "mlp" else 32
        specs = [
            LayerSpec.dense(inputs, hidden, Activation.RELU, **common),
            LayerSpec.dense(hidden, classes, Activation.IDENTITY, **common),
        ]
        return specs, shape
    if name == "small-conv":
        shape = tuple(input_shape) if input_shape is not None else (1, 28, 28)
        enforce(len(shape) == 3, f"small-conv needs a C x H x W input, got {shape}", BuildError)
        max_pool = LayerSpec(LayerKind.POOL, pool=PoolKind.MAX, pool_size=2)
        specs = [
            LayerSpec.conv(shape[0], 16, pad=1, **common),
            max_pool,
            LayerSpec.conv(16, 32, pad=1, **common),
            max_pool,
            LayerSpec(LayerKind.POOL, pool=PoolKind.GLOBAL_AVG),
            LayerSpec.dense(32, classes, Activation.IDENTITY, **common),
        ]
        return specs, shape
    if name == "convpool-cnn-c":
        shape = tuple(input_shape) if input_shape is not None else (3, 32, 32)
        enforce(len(shape) == 3, f"convpool-cnn-c needs a C x H x W input, got {shape}", BuildError)
        max_pool = LayerSpec(LayerKind.POOL, pool=PoolKind.MAX, pool_size=2)
        specs = [
            LayerSpec(LayerKind.NOISE, sigma=0.15),
            LayerSpec.conv(shape[0], 96, pad=1, **common),
            LayerSpec.conv(96, 96, pad=1, **common),
            LayerSpec.conv(96, 96, pad=1, **common),
            max_pool,
            LayerSpec.conv(96, 192, pad=1, **common),
            LayerSpec.conv(192, 192, pad=1, **common),
            LayerSpec.conv(192, 192, pad=1, **common),
            max_pool,
            # valid padding: 8 -> 6
            LayerSpec.conv(192, 192, pad=0, **common),
            LayerSpec.conv(192, 192, kernel=1, **common),
            LayerSpec.conv(192, 192, kernel=1, **common),
            LayerSpec(LayerKind.POOL, pool=PoolKind.GLOBAL_AVG),
            LayerSpec.dense(192, classes, Activation.IDENTITY, **common),
        ]
        return specs, shape
    raise BuildError(f"Unknown architecture {name!r}; expected one of {', '.join(ARCHITECTURES)}")


def prime_running_statistics(model: ModelState, x: Tensor) -> None:
    """Seed the running statistics of normalized layers from one train-mode pass on x."""
    snapshot = model.rng.counter
    forward(model, x, Mode.TRAIN)
    model.rng.counter = snapshot

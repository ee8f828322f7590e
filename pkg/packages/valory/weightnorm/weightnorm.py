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
This module contains the weight normalization reparameterization.

A weight tensor is stored as a direction v and a scale g per output unit, and the
effective weight of every unit is w = g * v / ||v||. The first axis of v indexes the
output units: a dense [out x in] matrix has one weight vector per row, a conv
[F x C x kh x kw] filter bank has one weight vector per filter.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from aea.exceptions import enforce

from packages.valory.weightnorm.exceptions import (
    ContractViolationError,
    DegenerateDirectionError,
    DimensionError,
    InvalidScaleError,
)
from packages.valory.weightnorm.numerics import Tensor, as_tensor


DEGENERATE_NORM = 1e-30
ORTHOGONALITY_TOLERANCE = 1e-8

Scalar = Union[float, Tensor]


def _rows(t: Tensor) -> Tensor:
    """View a tensor as [units x fan_in]; a 1-d tensor is a single unit."""
    return t.reshape(1, -1) if t.ndim == 1 else t.reshape(t.shape[0], -1)


def _per_unit(values: Tensor, like: Tensor) -> Tensor:
    """Reshape a per-unit vector so it broadcasts against a [units x ...] tensor."""
    return values.reshape((-1,) + (1,) * (like.ndim - 1))


def unit_norms(t: Tensor) -> Tensor:
    """Euclidean norm of every unit's weight vector."""
    return np.sqrt(np.sum(np.square(_rows(as_tensor(t))), axis=1))


def _check_norms(norms: Tensor) -> None:
    """Reject directions whose norm is numerically zero."""
    enforce(
        bool(np.all(norms > DEGENERATE_NORM)),
        f"Degenerate direction: ||v|| = {float(np.min(norms))!r}",
        DegenerateDirectionError,
    )


@dataclass
class WeightNormParam:
    """
    Direction and scale of a weight-normalized tensor.

    In log-scale mode s is the trained parameter and g is kept equal to exp(s) by
    refresh(). The cached norm_v is written only by refresh().
    """

    v: Tensor
    g: Tensor
    s: Optional[Tensor] = None
    norm_v: Tensor = field(init=False, repr=False)

    def __post_init__(self) -> None:
        """Validate shapes and fill the norm cache."""
        self.v = as_tensor(self.v)
        self.g = as_tensor(self.g)
        enforce(self.v.ndim >= 2, f"v must be [units x fan_in...], got {self.v.shape}", DimensionError)
        units = self.v.shape[0]
        enforce(self.g.shape == (units,), f"g must have shape ({units},), got {self.g.shape}", DimensionError)
        if self.s is not None:
            self.s = as_tensor(self.s)
            enforce(self.s.shape == (units,), f"s must have shape ({units},), got {self.s.shape}", DimensionError)
        self.refresh()

    @classmethod
    def create(cls, v: Tensor, g: Scalar, log_scale: bool = False) -> "WeightNormParam":
        """
        Build a parameter from a direction and a scale.

        :param v: a single weight vector or a [units x fan_in...] tensor.
        :param g: scale, a scalar or one value per unit.
        :param log_scale: train s = log(g) instead of g.
        :return: the parameter.
        """
        v = as_tensor(v)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        g = np.broadcast_to(as_tensor(g), (v.shape[0],)).copy()
        if not log_scale:
            return cls(v=v.copy(), g=g)
        enforce(bool(np.all(g > 0)), "Log-scale mode requires g > 0", InvalidScaleError)
        return cls(v=v.copy(), g=g, s=np.log(g))

    @property
    def log_scale(self) -> bool:
        """Whether the scale is parameterized as g = exp(s)."""
        return self.s is not None

    @property
    def units(self) -> int:
        """Number of output units."""
        return self.v.shape[0]

    def refresh(self) -> None:
        """Recompute the cached norms after an update (and g from s)."""
        if self.s is not None:
            self.g[...] = np.exp(self.s)
        norms = unit_norms(self.v)
        _check_norms(norms)
        self.norm_v = norms


@dataclass(frozen=True)
class ComposedWeight:
    """The effective weight together with the direction norms it was built from."""

    w: Tensor
    norm_v: Tensor


def compose_weight(p: WeightNormParam) -> ComposedWeight:
    """Compose the effective weight w = (g / ||v||) v for every unit."""
    _check_norms(p.norm_v)
    scale = _per_unit(p.g / p.norm_v, p.v)
    return ComposedWeight(w=scale * p.v, norm_v=p.norm_v.copy())


def collapse(p: WeightNormParam) -> Tensor:
    """The effective weight, used to move a layer to the standard parameterization."""
    return compose_weight(p).w


def _check_grad(grad_w: Tensor, p: WeightNormParam) -> Tensor:
    """Validate a weight gradient against the parameter shape."""
    grad_w = as_tensor(grad_w)
    if grad_w.ndim == 1 and p.units == 1 and grad_w.size == p.v.size:
        grad_w = grad_w.reshape(p.v.shape)
    enforce(
        grad_w.shape == p.v.shape,
        f"grad_w shape {grad_w.shape} does not match v shape {p.v.shape}",
        DimensionError,
    )
    _check_norms(p.norm_v)
    return grad_w


def grad_g(grad_w: Tensor, p: WeightNormParam) -> Tensor:
    """Gradient with respect to g: (grad_w . v) / ||v|| per unit."""
    grad_w = _check_grad(grad_w, p)
    return np.sum(_rows(grad_w) * _rows(p.v), axis=1) / p.norm_v


def grad_v(grad_w: Tensor, p: WeightNormParam) -> Tensor:
    """Gradient with respect to v: (g/||v||) grad_w - (g grad_g / ||v||^2) v."""
    grad_w = _check_grad(grad_w, p)
    scale = _per_unit(p.g / p.norm_v, p.v)
    radial = _per_unit(p.g * grad_g(grad_w, p) / np.square(p.norm_v), p.v)
    return scale * grad_w - radial * p.v


def grad_v_projected(grad_w: Tensor, p: WeightNormParam) -> Tensor:
    """
    Gradient with respect to v written as (g/||v||) M_w grad_w.

    M_w = I - w w^T / ||w||^2 is never materialized. Since w is parallel to v the
    projector is taken along v, which also covers g = 0.
    """
    grad_w = _check_grad(grad_w, p)
    scale = _per_unit(p.g / p.norm_v, p.v)
    return scale * project_complement(grad_w, p.v)


def project_complement(u: Tensor, w: Tensor) -> Tensor:
    """
    Remove from u its component along w, unit by unit.

    :param u: vector(s) to project, same shape as w.
    :param w: a single vector or a [units x fan_in...] tensor.
    :return: u - w (w . u) / ||w||^2, orthogonal to w.
    """
    u, w = as_tensor(u), as_tensor(w)
    enforce(u.shape == w.shape, f"Shapes differ: {u.shape} vs {w.shape}", DimensionError)
    u_rows, w_rows = _rows(u), _rows(w)
    sq_norms = np.sum(np.square(w_rows), axis=1)
    _check_norms(np.sqrt(sq_norms))
    coefficients = np.sum(w_rows * u_rows, axis=1) / sq_norms
    return (u_rows - coefficients[:, None] * w_rows).reshape(u.shape)


def grad_s(grad_g_value: Scalar, g: Scalar) -> Scalar:
    """Chain rule through g = exp(s): returns g * grad_g."""
    g_arr = as_tensor(g)
    enforce(bool(np.all(g_arr > 0)), f"Log-scale mode requires g > 0, got {g}", InvalidScaleError)
    result = g_arr * as_tensor(grad_g_value)
    return float(result) if result.ndim == 0 else result


def norm_growth_factor(delta_v: Tensor, v: Tensor) -> float:
    """
    Growth of ||v|| under an update orthogonal to v: sqrt(1 + c^2), c = ||dv|| / ||v||.

    :param delta_v: the update, orthogonal to v.
    :param v: the current direction vector.
    :return: the ratio ||v + delta_v|| / ||v||.
    """
    delta_v, v = as_tensor(delta_v).ravel(), as_tensor(v).ravel()
    enforce(delta_v.shape == v.shape, f"Shapes differ: {delta_v.shape} vs {v.shape}", DimensionError)
    norm_v = float(np.linalg.norm(v))
    _check_norms(np.array([norm_v]))
    norm_delta = float(np.linalg.norm(delta_v))
    enforce(
        abs(float(delta_v @ v)) <= ORTHOGONALITY_TOLERANCE * norm_delta * norm_v,
        "Update is not orthogonal to v",
        ContractViolationError,
    )
    c = norm_delta / norm_v
    return float(np.sqrt(1.0 + c * c))

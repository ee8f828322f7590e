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

"""Tests for the weightnorm module."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from packages.valory.weightnorm.exceptions import (
    ContractViolationError,
    DegenerateDirectionError,
    DimensionError,
    InvalidScaleError,
)
from packages.valory.weightnorm.weightnorm import (
    WeightNormParam,
    collapse,
    compose_weight,
    grad_g,
    grad_s,
    grad_v,
    grad_v_projected,
    norm_growth_factor,
    project_complement,
)


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    """Relative difference of two arrays."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def test_gradient_forms_agree_on_random_instances() -> None:
    """Test that the explicit and projected v-gradients agree over many random draws."""
    generator = np.random.default_rng(0)
    for _ in range(1000):
        k = int(generator.integers(2, 65))
        p = WeightNormParam.create(generator.standard_normal(k), generator.standard_normal())
        grad_w = generator.standard_normal(k)
        assert _relative(grad_v(grad_w, p), grad_v_projected(grad_w, p)) <= 1e-10


def test_composed_norm_equals_abs_g() -> None:
    """Test ||w|| = |g| over many random draws."""
    generator = np.random.default_rng(1)
    for _ in range(1000):
        k = int(generator.integers(1, 65))
        g = generator.standard_normal() * 10
        w = compose_weight(WeightNormParam.create(generator.standard_normal(k) * 100, g)).w
        assert abs(np.linalg.norm(w) - abs(g)) <= 1e-12 * max(1.0, abs(g))


def test_compose_weight_examples() -> None:
    """Test direction preservation and the zero-scale case."""
    w = compose_weight(WeightNormParam.create(np.array([3.0, 4.0]), 10.0)).w
    np.testing.assert_allclose(w, [[6.0, 8.0]])
    w = compose_weight(WeightNormParam.create(np.array([3.0, 4.0]), 0.0)).w
    np.testing.assert_array_equal(w, [[0.0, 0.0]])


def test_per_unit_composition() -> None:
    """Test that every output unit is normalized on its own."""
    v = np.array([[3.0, 4.0], [0.0, 2.0]])
    composed = compose_weight(WeightNormParam.create(v, np.array([1.0, 5.0])))
    np.testing.assert_allclose(composed.w, [[0.6, 0.8], [0.0, 5.0]])
    np.testing.assert_allclose(composed.norm_v, [5.0, 2.0])


def test_conv_filters_are_units() -> None:
    """Test that each filter of a conv weight is one weight vector."""
    v = np.random.default_rng(2).standard_normal((3, 2, 3, 3))
    w = collapse(WeightNormParam.create(v, np.array([1.0, 2.0, 3.0])))
    np.testing.assert_allclose(np.linalg.norm(w.reshape(3, -1), axis=1), [1.0, 2.0, 3.0])


def test_degenerate_direction_is_rejected() -> None:
    """Test that a zero v cannot be normalized."""
    with pytest.raises(DegenerateDirectionError):
        WeightNormParam.create(np.zeros(3), 1.0)


def test_shape_validation() -> None:
    """Test mismatched g and gradient shapes."""
    with pytest.raises(DimensionError):
        WeightNormParam(v=np.ones((2, 3)), g=np.ones(3))
    p = WeightNormParam.create(np.ones(3), 1.0)
    with pytest.raises(DimensionError):
        grad_g(np.ones(4), p)


def test_grad_g_and_grad_v_closed_form() -> None:
    """Test the gradients on a hand-computed case."""
    p = WeightNormParam.create(np.array([3.0, 4.0]), 2.0)
    grad_w = np.array([1.0, 0.0])
    np.testing.assert_allclose(grad_g(grad_w, p), [0.6])
    # (g/||v||) grad_w - (g grad_g / ||v||^2) v
    np.testing.assert_allclose(grad_v(grad_w, p), [[0.4 - 2 * 0.6 * 3 / 25, -2 * 0.6 * 4 / 25]])


def test_zero_scale_gives_zero_v_gradient() -> None:
    """Test that g = 0 gives a zero v-gradient in both forms."""
    p = WeightNormParam.create(np.array([1.0, 2.0, 2.0]), 0.0)
    grad_w = np.array([1.0, -1.0, 3.0])
    np.testing.assert_array_equal(grad_v(grad_w, p), np.zeros((1, 3)))
    np.testing.assert_array_equal(grad_v_projected(grad_w, p), np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=2, max_value=16), st.integers(min_value=0, max_value=2**32 - 1))
def test_v_gradient_is_orthogonal_to_v(k: int, seed: int) -> None:
    """Test that the v-gradient never has a component along v."""
    generator = np.random.default_rng(seed)
    p = WeightNormParam.create(generator.standard_normal(k), generator.standard_normal())
    gradient = grad_v(generator.standard_normal(k), p).ravel()
    assert abs(gradient @ p.v.ravel()) <= 1e-10 * max(np.linalg.norm(gradient) * np.linalg.norm(p.v), 1e-300)


def test_v_gradient_scales_inversely_with_v() -> None:
    """Test that rescaling v by alpha divides the v-gradient by alpha."""
    generator = np.random.default_rng(3)
    v, grad_w = generator.standard_normal(6), generator.standard_normal(6)
    base = grad_v(grad_w, WeightNormParam.create(v, 1.5))
    scaled = grad_v(grad_w, WeightNormParam.create(7.0 * v, 1.5))
    np.testing.assert_allclose(scaled, base / 7.0, rtol=1e-12)


def test_project_complement() -> None:
    """Test the projection onto the orthogonal complement."""
    np.testing.assert_allclose(project_complement(np.array([1.0, 1.0]), np.array([1.0, 0.0])), [0.0, 1.0])
    with pytest.raises(DegenerateDirectionError):
        project_complement(np.ones(2), np.zeros(2))


def test_log_scale() -> None:
    """Test g = exp(s) bookkeeping and the chain rule."""
    p = WeightNormParam.create(np.array([1.0, 0.0]), 2.0, log_scale=True)
    np.testing.assert_allclose(p.s, [np.log(2.0)])
    p.s[...] = 0.0
    p.refresh()
    np.testing.assert_allclose(p.g, [1.0])
    assert grad_s(0.5, 2.0) == 1.0
    with pytest.raises(InvalidScaleError):
        grad_s(1.0, 0.0)
    with pytest.raises(InvalidScaleError):
        WeightNormParam.create(np.ones(2), -1.0, log_scale=True)


def test_norm_growth_factor() -> None:
    """Test sqrt(1 + c^2) and the orthogonality precondition."""
    assert norm_growth_factor(np.array([0.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(np.sqrt(2.0), abs=1e-15)
    assert norm_growth_factor(np.zeros(2), np.array([1.0, 0.0])) == 1.0
    with pytest.raises(ContractViolationError):
        norm_growth_factor(np.array([1.0, 1.0]), np.array([1.0, 0.0]))


def test_sgd_steps_grow_the_norm_monotonically() -> None:
    """Test orthogonal updates, monotone growth and the growth factor over many plain SGD steps."""
    generator = np.random.default_rng(4)
    p = WeightNormParam.create(generator.standard_normal(8), 1.3)
    target = generator.standard_normal(8)
    for _ in range(100):
        w = compose_weight(p).w.ravel()
        delta = -0.01 * grad_v(w - target, p).ravel()
        v = p.v.ravel().copy()
        assert abs(delta @ v) <= 1e-10 * np.linalg.norm(delta) * np.linalg.norm(v)
        factor = norm_growth_factor(delta, v)
        p.v[...] = (v + delta).reshape(p.v.shape)
        p.refresh()
        new_norm = float(p.norm_v[0])
        assert new_norm >= np.linalg.norm(v)
        assert abs(new_norm / np.linalg.norm(v) - factor) <= 1e-10


def _sine_loss(w: np.ndarray, c: np.ndarray) -> float:
    """A smooth non-quadratic scalar loss of the effective weight."""
    return float(np.sum(c * np.sin(w)))


def test_gradients_match_finite_differences() -> None:
    """Test grad_g, grad_v and grad_s against central differences through compose_weight."""
    generator = np.random.default_rng(21)
    v, g = generator.standard_normal((3, 4)), generator.uniform(0.5, 2.0, 3)
    c = generator.standard_normal((3, 4))
    p = WeightNormParam.create(v, g)
    grad_w = c * np.cos(compose_weight(p).w)
    analytic_g, analytic_v = grad_g(grad_w, p), grad_v(grad_w, p)
    analytic_s = grad_s(analytic_g, g)

    def loss(v_value: np.ndarray, g_value: np.ndarray) -> float:
        return _sine_loss(compose_weight(WeightNormParam.create(v_value, g_value)).w, c)

    h = 1e-5
    for index in np.ndindex(v.shape):
        plus, minus = v.copy(), v.copy()
        plus[index] += h
        minus[index] -= h
        numeric = (loss(plus, g) - loss(minus, g)) / (2 * h)
        assert abs(numeric - analytic_v[index]) <= 1e-6 * max(1.0, abs(numeric))
    for unit in range(3):
        step = np.zeros(3)
        step[unit] = h
        numeric = (loss(v, g + step) - loss(v, g - step)) / (2 * h)
        assert abs(numeric - analytic_g[unit]) <= 1e-6 * max(1.0, abs(numeric))
        numeric = (loss(v, np.exp(np.log(g) + step)) - loss(v, np.exp(np.log(g) - step))) / (2 * h)
        assert abs(numeric - analytic_s[unit]) <= 1e-6 * max(1.0, abs(numeric))


@settings(max_examples=200, deadline=None)
@given(alpha=st.floats(min_value=1e-3, max_value=1e3), seed=st.integers(min_value=0, max_value=2**16))
def test_composition_ignores_direction_scale(alpha: float, seed: int) -> None:
    """Test that rescaling v by a positive factor leaves w unchanged."""
    generator = np.random.default_rng(seed)
    v, g = generator.standard_normal((2, 5)), generator.standard_normal(2)
    w = compose_weight(WeightNormParam.create(v, g)).w
    scaled = compose_weight(WeightNormParam.create(alpha * v, g)).w
    np.testing.assert_allclose(scaled, w, rtol=0, atol=1e-12 * max(1.0, float(np.max(np.abs(g)))))

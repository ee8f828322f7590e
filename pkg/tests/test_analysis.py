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

"""Tests for the analysis module."""

from typing import Sequence, Tuple

import numpy as np
import pytest

from packages.valory.weightnorm.analysis import (
    GradCovariance,
    NormTrace,
    analyze_layer,
    dominant_alignment,
    grad_covariance,
    per_example_weight_grads,
    power_iteration,
    record_norm_trace,
    self_stabilization,
    snapshot_directions,
    transformed_covariance,
)
from packages.valory.weightnorm.exceptions import (
    ContractViolationError,
    DimensionError,
    SampleSizeError,
    UndefinedAlignmentError,
)
from packages.valory.weightnorm.network import (
    Activation,
    LayerSpec,
    ModelState,
    NormMode,
    backward,
    build_initialized,
    build_model,
    convert_model,
    forward,
    prime_running_statistics,
    softmax_xent,
)
from packages.valory.weightnorm.normalization import Mode
from packages.valory.weightnorm.numerics import RngStream, jacobi_eigh
from packages.valory.weightnorm.weightnorm import WeightNormParam, compose_weight


def _model(norm_mode: NormMode = NormMode.WEIGHT_NORM, seed: int = 0) -> ModelState:
    """Small two-layer classifier."""
    return build_model(
        [LayerSpec.dense(5, 6, Activation.RELU, norm_mode), LayerSpec.dense(6, 3, norm_mode=norm_mode)],
        RngStream(seed),
    )


def _data(seed: int = 0, n: int = 40) -> Tuple[np.ndarray, np.ndarray]:
    """Random inputs with labels."""
    generator = np.random.default_rng(seed)
    return generator.standard_normal((n, 5)), generator.integers(0, 3, n)


def _psd_with_spectrum(seed: int, spectrum: Sequence[float]) -> np.ndarray:
    """Q diag(spectrum) Q^T for a random orthogonal Q."""
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((len(spectrum), len(spectrum))))
    return (q * np.asarray(spectrum)) @ q.T


class TestGradCovariance:
    """Tests for grad_covariance."""

    def test_examples(self) -> None:
        """Test identical rows and the two-row hand computation."""
        np.testing.assert_array_equal(grad_covariance(np.tile([1.0, 2.0], (4, 1))).c, np.zeros((2, 2)))
        result = grad_covariance(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        np.testing.assert_array_equal(result.c, [[1.0, 0.0], [0.0, 0.0]])
        assert result.n_samples == 2

    def test_two_pass_oracle_and_row_order(self) -> None:
        """Test a random matrix against the two-pass formula and a row permutation."""
        grads = np.random.default_rng(1).standard_normal((50, 4))
        centred = grads - grads.mean(axis=0)
        expected = sum(np.outer(row, row) for row in centred) / 50
        result = grad_covariance(grads).c
        np.testing.assert_allclose(result, expected, atol=1e-12)
        np.testing.assert_allclose(result, result.T, atol=1e-12)
        np.testing.assert_allclose(grad_covariance(grads[::-1]).c, result, atol=1e-12)
        assert jacobi_eigh(result)[0].min() >= -1e-10

    def test_sample_size(self) -> None:
        """Test that one sample has no covariance."""
        with pytest.raises(SampleSizeError):
            grad_covariance(np.ones((1, 3)))


class TestTransformedCovariance:
    """Tests for transformed_covariance."""

    def test_annihilates_w(self) -> None:
        """Test D w = 0 for a random covariance."""
        generator = np.random.default_rng(2)
        p = WeightNormParam.create(generator.standard_normal(5), 1.7)
        c = grad_covariance(generator.standard_normal((30, 5)))
        d = transformed_covariance(c, p)
        w = compose_weight(p).w.ravel()
        np.testing.assert_allclose(d @ w, np.zeros(5), atol=1e-12)
        np.testing.assert_allclose(d, d.T, atol=0)
        assert jacobi_eigh(d)[0].min() >= -1e-10

    def test_identity_covariance(self) -> None:
        """Test that C = I maps to the scaled projector."""
        v = np.array([3.0, 4.0, 0.0])
        p = WeightNormParam.create(v, 2.0)
        c = grad_covariance(np.vstack([np.eye(3), -np.eye(3)]) * np.sqrt(3.0))
        np.testing.assert_allclose(c.c, np.eye(3), atol=1e-15)
        projector = np.eye(3) - np.outer(v, v) / 25.0
        np.testing.assert_allclose(transformed_covariance(c, p), 4.0 / 25.0 * projector, atol=1e-14)

    def test_matrix_product_oracle(self) -> None:
        """Test a random case against the explicit product."""
        generator = np.random.default_rng(3)
        v = generator.standard_normal(4)
        p = WeightNormParam.create(v, -0.8)
        c = grad_covariance(generator.standard_normal((20, 4)))
        w = 0.8 * v / np.linalg.norm(v)
        m_w = np.eye(4) - np.outer(w, w) / (w @ w)
        expected = 0.64 / (v @ v) * m_w @ c.c @ m_w
        np.testing.assert_allclose(transformed_covariance(c, p), expected, atol=1e-12)

    def test_shape_errors(self) -> None:
        """Test multi-unit parameters and mismatched covariances."""
        c = grad_covariance(np.random.default_rng(4).standard_normal((5, 3)))
        with pytest.raises(DimensionError):
            transformed_covariance(c, WeightNormParam.create(np.ones((2, 3)), 1.0))
        with pytest.raises(DimensionError):
            transformed_covariance(c, WeightNormParam.create(np.ones(4), 1.0))


class TestAlignment:
    """Tests for power_iteration and dominant_alignment."""

    def test_rank_one(self) -> None:
        """Test aligned and orthogonal rank-one covariances."""
        w = np.array([1.0, 2.0, 2.0])
        u = np.array([2.0, -1.0, 0.0])
        aligned = grad_covariance(np.vstack([w, -w]))
        orthogonal = grad_covariance(np.vstack([u, -u]))
        assert dominant_alignment(aligned, w) == pytest.approx(1.0, abs=1e-12)
        assert dominant_alignment(orthogonal, w) == pytest.approx(0.0, abs=1e-12)

    def test_jacobi_oracle(self) -> None:
        """Test the dominant eigenvector against a full eigendecomposition."""
        c = _psd_with_spectrum(5, [10.0, 5.0, 3.0, 2.0, 1.0, 0.5])
        eigenvalues, vectors = jacobi_eigh(c)
        eigenvalue, top = power_iteration(c)
        assert eigenvalue == pytest.approx(eigenvalues[-1], rel=1e-8)
        assert abs(abs(top @ vectors[:, -1]) - 1.0) <= 1e-8
        w = np.random.default_rng(5).standard_normal(6)
        expected = abs(vectors[:, -1] @ w) / np.linalg.norm(w)
        assert dominant_alignment(GradCovariance(c=c, n_samples=12), w) == pytest.approx(expected, abs=1e-8)

    def test_zero_matrix(self) -> None:
        """Test that alignment is undefined without gradient variance."""
        with pytest.raises(UndefinedAlignmentError):
            dominant_alignment(grad_covariance(np.ones((3, 2))), np.ones(2))


class TestNormTrace:
    """Tests for the norm traces and the stabilization experiment."""

    def test_empty_and_requires_weight_normalization(self) -> None:
        """Test zero steps and models without weight-normalized layers."""
        assert len(NormTrace()) == 0
        model = _model(NormMode.STANDARD)
        with pytest.raises(ContractViolationError):
            record_norm_trace(NormTrace(), model, 0, snapshot_directions(model))

    def test_record_row(self) -> None:
        """Test the recorded values of one update."""
        model = _model()
        previous = snapshot_directions(model)
        model.layers[1].param.v[...] *= 2.0
        model.refresh()
        trace = record_norm_trace(NormTrace(), model, 3, previous)
        assert trace.layers() == [0, 1]
        np.testing.assert_allclose(trace.column("relative_update", 1), [1.0], rtol=1e-12)
        np.testing.assert_array_equal(trace.column("relative_update", 0), [0.0])
        row = trace.rows[1]
        assert row.step == 3
        assert row.g_over_v == pytest.approx(np.mean(1.0 / np.linalg.norm(model.layers[1].param.v, axis=1)))

    def test_self_stabilization(self) -> None:
        """Test monotone norms under plain SGD and the damped effective-scale ratio."""
        x, labels = _data(6)
        report = self_stabilization(lambda: _model(seed=6), x, labels, lr=0.05, steps=40)
        for trace in (report.low, report.high):
            assert len(trace) == 80
            for layer in trace.layers():
                norms = trace.column("v_norm", layer)
                assert np.all(np.diff(norms) >= -1e-12 * norms[:-1])
                assert np.all(np.isfinite(trace.column("g_over_v", layer)))
        assert report.lr_ratio == 10.0
        assert 0.0 < report.late_ratio < 10.0


class TestPerExampleGradients:
    """Tests for the per-example gradients."""

    def test_mean_matches_batch_gradient(self) -> None:
        """Test that per-example gradients average to the minibatch gradient."""
        model = _model()
        x, labels = _data(7, 12)
        counter = model.rng.counter
        grads = per_example_weight_grads(model, x, labels, 0)
        assert grads.shape == (12, 6, 5)
        assert model.rng.counter == counter
        cache, logits = forward(model, x, Mode.TRAIN)
        batch = backward(model, cache, softmax_xent(logits, labels)[1], weight_grads=True)["0.weight"]
        np.testing.assert_allclose(grads.mean(axis=0), batch, atol=1e-12)

    def test_example_cap_and_layer_check(self) -> None:
        """Test the example cap and non-weight layers."""
        model = _model()
        x, labels = _data(8, 300)
        assert per_example_weight_grads(model, x, labels, 1).shape[0] == 256
        with pytest.raises(DimensionError):
            per_example_weight_grads(model, x, labels, 5)

    @pytest.mark.parametrize("mode", [NormMode.WEIGHT_NORM, NormMode.STANDARD])
    def test_analyze_layer(self, mode: NormMode) -> None:
        """Test the per-unit statistics of a layer."""
        model = _model(mode, seed=9)
        x, labels = _data(9, 64)
        rows = analyze_layer(model, x, labels, 1, units=2)
        assert [row.unit for row in rows] == [0, 1]
        for row in rows:
            layer = model.layers[1]
            w = layer.effective_weight()[row.unit]
            if mode is NormMode.WEIGHT_NORM:
                factor = (layer.param.g[row.unit] / np.linalg.norm(layer.param.v[row.unit])) ** 2
            else:
                factor = 1.0
            assert 0.0 <= row.alignment <= 1.0
            assert row.trace_d <= factor * row.trace_c * (1 + 1e-12)
            assert row.top_c >= row.trace_c / w.size - 1e-12


def _primed_model(norm_mode: NormMode, seed: int = 0) -> Tuple[ModelState, np.ndarray, np.ndarray]:
    """Data-initialized classifier in one parameterization, with running statistics."""
    x, labels = _data(seed, 48)
    specs = [LayerSpec.dense(5, 6, Activation.RELU), LayerSpec.dense(6, 3)]
    template, _ = build_initialized(specs, RngStream(seed), x, input_shape=(5,))
    model = convert_model(template, norm_mode)
    prime_running_statistics(model, x)
    return model, x, labels


class TestNormalizedModels:
    """Tests for per-example gradients and layer statistics under every parameterization."""

    @pytest.mark.parametrize("mode", list(NormMode))
    def test_analyze_layer_every_mode(self, mode: NormMode) -> None:
        """Test that every parameterization yields unit statistics and keeps its state."""
        model, x, labels = _primed_model(mode, seed=4)
        buffers = {name: value.copy() for name, value in model.buffers().items()}
        counter = model.rng.counter
        rows = analyze_layer(model, x, labels, 0, units=6)
        assert rows
        for row in rows:
            assert 0.0 <= row.alignment <= 1.0
            assert row.trace_c > 0.0
        assert model.rng.counter == counter
        assert buffers.keys() == model.buffers().keys()
        for name, value in model.buffers().items():
            np.testing.assert_array_equal(value, buffers[name])

    @pytest.mark.parametrize("mode", [NormMode.BATCH_NORM, NormMode.MEAN_ONLY, NormMode.WEIGHT_NORM_MEAN_ONLY])
    def test_mean_matches_frozen_batch_gradient(self, mode: NormMode) -> None:
        """Test that per-example gradients average to the eval-mode minibatch gradient."""
        model, x, labels = _primed_model(mode, seed=5)
        grads = per_example_weight_grads(model, x[:10], labels[:10], 1)
        assert grads.shape == (10, 3, 6)
        assert np.any(grads)
        cache, logits = forward(model, x[:10], Mode.EVAL)
        batch = backward(
            model, cache, softmax_xent(logits, labels[:10])[1], weight_grads=True, frozen_statistics=True
        )["1.weight"]
        np.testing.assert_allclose(grads.mean(axis=0), batch, atol=1e-12)

    @pytest.mark.parametrize("mode", [NormMode.BATCH_NORM, NormMode.MEAN_ONLY])
    def test_missing_running_statistics(self, mode: NormMode) -> None:
        """Test that normalized layers without running statistics are rejected."""
        x, labels = _data(6, 8)
        template, _ = build_initialized(
            [LayerSpec.dense(5, 6, Activation.RELU), LayerSpec.dense(6, 3)], RngStream(6), x, input_shape=(5,)
        )
        model = convert_model(template, mode)
        with pytest.raises(ContractViolationError, match="running statistics"):
            per_example_weight_grads(model, x, labels, 0)

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

"""Tests for the checkpoint format."""

import json
import struct
from pathlib import Path
from typing import Any, Callable, Dict

import numpy as np
import pytest

from packages.valory.weightnorm.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from packages.valory.weightnorm.exceptions import DataError, DataFormatError, DataLengthError
from packages.valory.weightnorm.network import (
    Activation,
    LayerKind,
    LayerSpec,
    ModelState,
    NormMode,
    PoolKind,
    build_initialized,
    convert_model,
    forward,
    prime_running_statistics,
)
from packages.valory.weightnorm.normalization import Mode
from packages.valory.weightnorm.numerics import RngStream


def _model(mode: NormMode, log_scale: bool = False) -> ModelState:
    """An initialized conv model with running statistics."""
    specs = [
        LayerSpec(LayerKind.NOISE, sigma=0.1),
        LayerSpec.conv(1, 3, pad=1),
        LayerSpec(LayerKind.POOL, pool=PoolKind.MAX),
        LayerSpec(LayerKind.POOL, pool=PoolKind.GLOBAL_AVG),
        LayerSpec.dense(3, 2, Activation.IDENTITY),
    ]
    x = np.random.default_rng(0).standard_normal((6, 16))
    template, _ = build_initialized(specs, RngStream(3), x, input_shape=(1, 4, 4))
    model = convert_model(template, mode, log_scale=log_scale, bn_eps=1e-5, bn_momentum=0.8)
    prime_running_statistics(model, x)
    return model


@pytest.mark.parametrize(
    "mode,log_scale",
    [(mode, False) for mode in NormMode] + [(NormMode.WEIGHT_NORM, True)],
)
def test_round_trip(tmp_path: Path, mode: NormMode, log_scale: bool) -> None:
    """Test that a saved model reloads with identical state and outputs."""
    model = _model(mode, log_scale)
    path = save_checkpoint(tmp_path / "nested" / "model.ckpt", model)
    assert path.read_bytes().startswith(MAGIC)
    loaded = load_checkpoint(path)
    assert loaded.specs() == model.specs()
    assert loaded.input_shape == model.input_shape
    assert (loaded.rng.seed, loaded.rng.counter, loaded.rng.stream) == (model.rng.seed, model.rng.counter, model.rng.stream)
    for name, value in model.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[name], value)
    assert loaded.buffers().keys() == model.buffers().keys()
    for name, value in model.buffers().items():
        np.testing.assert_array_equal(loaded.buffers()[name], value)
    x = np.random.default_rng(1).standard_normal((3, 16))
    np.testing.assert_array_equal(forward(loaded, x, Mode.EVAL)[1], forward(model, x, Mode.EVAL)[1])
    np.testing.assert_array_equal(forward(loaded, x, Mode.TRAIN)[1], forward(model, x, Mode.TRAIN)[1])


def _rewrite_manifest(path: Path, edit: Callable[[Dict[str, Any]], Any]) -> None:
    """Decode, edit and re-encode the manifest of a checkpoint."""
    raw = path.read_bytes()
    start = len(MAGIC) + 8
    (length,) = struct.unpack("<Q", raw[len(MAGIC) : start])
    manifest = json.loads(raw[start : start + length])
    edit(manifest)
    encoded = json.dumps(manifest).encode("utf-8")
    path.write_bytes(MAGIC + struct.pack("<Q", len(encoded)) + encoded + raw[start + length :])


def test_errors(tmp_path: Path) -> None:
    """Test missing files, bad magic, truncation and manifest problems."""
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(DataFormatError):
        load_checkpoint(bad)
    path = save_checkpoint(tmp_path / "model.ckpt", _model(NormMode.WEIGHT_NORM))
    raw = path.read_bytes()
    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(raw[:-8])
    with pytest.raises(DataLengthError):
        load_checkpoint(truncated)
    truncated.write_bytes(raw[: len(MAGIC) + 4])
    with pytest.raises(DataLengthError):
        load_checkpoint(truncated)

    _rewrite_manifest(path, lambda manifest: manifest.update(format_version=2))
    with pytest.raises(DataFormatError):
        load_checkpoint(path)
    path = save_checkpoint(tmp_path / "model.ckpt", _model(NormMode.WEIGHT_NORM))
    _rewrite_manifest(path, lambda manifest: manifest["tensors"].pop(0))
    with pytest.raises(DataFormatError):
        load_checkpoint(path)
    path = save_checkpoint(tmp_path / "model.ckpt", _model(NormMode.WEIGHT_NORM))
    _rewrite_manifest(path, lambda manifest: manifest["layers"][1].update(kind="lstm"))
    with pytest.raises(DataFormatError):
        load_checkpoint(path)

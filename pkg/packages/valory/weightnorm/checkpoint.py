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
This module contains the checkpoint format.

A checkpoint is the magic b"WNCKPT\x00\x01", an 8-byte little-endian manifest
length, a UTF-8 JSON manifest and the raw little-endian float64 tensor data.
The manifest lists every tensor with its name, shape and byte offset into the
data section, together with the layer specifications needed to rebuild the model.
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from packages.valory.weightnorm import PUBLIC_ID
from packages.valory.weightnorm.exceptions import (
    BuildError,
    DataError,
    DataFormatError,
    DataLengthError,
)
from packages.valory.weightnorm.network import LayerSpec, ModelState, WeightLayer, build_model
from packages.valory.weightnorm.normalization import DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM
from packages.valory.weightnorm.numerics import RngStream


MAGIC = b"WNCKPT\x00\x01"
FORMAT_VERSION = 1
DTYPE = "<f8"
_LENGTH = struct.Struct("<Q")


def _normalization_settings(model: ModelState) -> Dict[str, float]:
    """eps and momentum shared by the model's normalized layers."""
    for _, layer in model.weight_layers:
        if layer.bn is not None:
            return {"bn_eps": layer.bn.eps, "bn_momentum": layer.bn.momentum}
        if layer.meanonly is not None:
            return {"bn_eps": DEFAULT_BN_EPS, "bn_momentum": layer.meanonly.momentum}
    return {"bn_eps": DEFAULT_BN_EPS, "bn_momentum": DEFAULT_BN_MOMENTUM}


def save_checkpoint(path: Union[str, Path], model: ModelState) -> Path:
    """Write parameters, running statistics, layer specifications and the stream position."""
    path = Path(path)
    tensors: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    named = [("parameter", name, value) for name, value in model.parameters().items()]
    named += [("buffer", name, value) for name, value in model.buffers().items()]
    for role, name, value in named:
        data = np.ascontiguousarray(value, dtype=DTYPE).tobytes()
        tensors.append({"name": name, "role": role, "shape": list(value.shape), "offset": offset, "dtype": DTYPE})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "producer": str(PUBLIC_ID),
        "layers": [spec.to_dict() for spec in model.specs()],
        "input_shape": list(model.input_shape),
        "normalization": _normalization_settings(model),
        "rng": {"seed": model.rng.seed, "counter": model.rng.counter, "stream": model.rng.stream},
        "tensors": tensors,
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(encoded)))
        f.write(encoded)
        for chunk in chunks:
            f.write(chunk)
    return path


def _read_manifest(raw: bytes, path: Path) -> Dict[str, Any]:
    """Validate the preamble and decode the manifest."""
    if not raw.startswith(MAGIC):
        raise DataFormatError(f"{path} is not a checkpoint (bad magic)")
    start = len(MAGIC) + _LENGTH.size
    if len(raw) < start:
        raise DataLengthError(f"{path} is truncated inside its preamble")
    (length,) = _LENGTH.unpack(raw[len(MAGIC) : start])
    if len(raw) < start + length:
        raise DataLengthError(f"{path} is truncated inside its manifest")
    try:
        manifest = json.loads(raw[start : start + length].decode("utf-8"))
    except ValueError as e:
        raise DataFormatError(f"{path} has an unreadable manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"{path} has format version {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    manifest["_data_start"] = start + length
    return manifest


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    """Rebuild a model saved by save_checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint {path} does not exist")
    raw = path.read_bytes()
    manifest = _read_manifest(raw, path)
    try:
        specs = [LayerSpec.from_dict(layer) for layer in manifest["layers"]]
        settings = manifest["normalization"]
        model = build_model(specs, RngStream(0), manifest["input_shape"], settings["bn_eps"], settings["bn_momentum"])
        model.rng = RngStream(**manifest["rng"])
        entries = [(tuple(entry["shape"]), entry["offset"], entry["role"], entry["name"]) for entry in manifest["tensors"]]
    except (KeyError, TypeError, BuildError) as e:
        raise DataFormatError(f"{path} has an invalid manifest: {e}") from e
    params = model.parameters()
    missing = set(params) - {name for _, _, role, name in entries if role == "parameter"}
    if missing:
        raise DataFormatError(f"{path} lacks tensors {', '.join(sorted(missing))}")
    buffers: Dict[int, Dict[str, np.ndarray]] = {}
    data_start = manifest["_data_start"]
    for shape, offset, role, name in entries:
        count = int(np.prod(shape)) if shape else 1
        begin = data_start + offset
        end = begin + 8 * count
        if len(raw) < end:
            raise DataLengthError(f"{path} is truncated inside tensor {name}")
        value = np.frombuffer(raw[begin:end], dtype=DTYPE).astype(np.float64).reshape(shape)
        if role == "buffer":
            index, local_name = name.split(".", 1)
            buffers.setdefault(int(index), {})[local_name] = value
            continue
        if name not in params or params[name].shape != shape:
            raise DataFormatError(f"{path} holds tensor {name} of shape {shape} that the layers do not define")
        params[name][...] = value
    for index, local in buffers.items():
        layer = model.layers[index]
        if isinstance(layer, WeightLayer):
            layer.load_buffers(local)
    model.refresh()
    return model

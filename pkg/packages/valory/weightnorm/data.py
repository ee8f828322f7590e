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

"""This module contains dataset ingestion: IDX files, synthetic blobs and minibatching."""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, List, Tuple, Union

import numpy as np
from aea.exceptions import enforce
from aea.helpers.logging import setup_logger

from packages.valory.weightnorm.exceptions import (
    DataConsistencyError,
    DataError,
    DataFormatError,
    DataLengthError,
)
from packages.valory.weightnorm.models import DatasetKind, DatasetSpec
from packages.valory.weightnorm.numerics import (
    RngStream,
    Tensor,
    apply_zca,
    permutation,
    sample_normal,
    zca_whiten,
)


_logger = setup_logger("weightnorm.data")

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
PIXEL_SCALE = 255.0

PathLike = Union[str, Path]


def _open(path: PathLike) -> IO[bytes]:
    """Open a raw or gzipped IDX file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Data file {path} does not exist")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_header(stream: IO[bytes], path: PathLike, magic: int, dims: int) -> Tuple[int, ...]:
    """Check the magic number and return the dimension sizes."""
    raw = stream.read(4 * (1 + dims))
    if len(raw) < 4:
        raise DataLengthError(f"{path} is too short to hold an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path} has magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < 4 * (1 + dims):
        raise DataLengthError(f"{path} is truncated inside its header")
    return struct.unpack(f">{dims}I", raw[4:])


def _read_payload(stream: IO[bytes], path: PathLike, count: int) -> np.ndarray:
    """Read exactly count unsigned bytes."""
    payload = stream.read(count)
    if len(payload) < count:
        raise DataLengthError(f"{path} holds {len(payload)} data bytes, expected {count}")
    return np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path: PathLike, labels_path: PathLike) -> Tuple[Tensor, np.ndarray]:
    """
    Parse a big-endian IDX image/label pair.

    :param images_path: image file, magic 0x00000803, dims [n, rows, cols].
    :param labels_path: label file, magic 0x00000801, dims [n].
    :return: [n x rows x cols] pixels scaled to [0, 1] and int64 labels.
    """
    with _open(images_path) as stream:
        n_images, rows, cols = _read_header(stream, images_path, IMAGE_MAGIC, 3)
        pixels = _read_payload(stream, images_path, n_images * rows * cols)
    with _open(labels_path) as stream:
        (n_labels,) = _read_header(stream, labels_path, LABEL_MAGIC, 1)
        labels = _read_payload(stream, labels_path, n_labels)
    if n_images != n_labels:
        raise DataConsistencyError(f"{images_path} holds {n_images} images but {labels_path} holds {n_labels} labels")
    images = pixels.reshape(n_images, rows, cols).astype(np.float64) / PIXEL_SCALE
    return images, labels.astype(np.int64)


def write_idx(path: PathLike, array: np.ndarray, kind: str) -> Path:
    """
    Write images ([n x rows x cols], floats in [0, 1] or uint8) or labels ([n]) as IDX.

    :param path: destination; a .gz suffix compresses.
    :param array: the data.
    :param kind: 'images' or 'labels'.
    :return: the path written.
    """
    enforce(kind in ("images", "labels"), f"kind must be 'images' or 'labels', got {kind!r}", DataError)
    array = np.asarray(array)
    if kind == "images":
        enforce(array.ndim == 3, f"Images must be [n x rows x cols], got {array.shape}", DataFormatError)
        magic = IMAGE_MAGIC
    else:
        enforce(array.ndim == 1, f"Labels must be [n], got {array.shape}", DataFormatError)
        magic = LABEL_MAGIC
    if array.dtype != np.uint8:
        if np.issubdtype(array.dtype, np.floating) and kind == "images":
            array = np.rint(np.clip(array, 0.0, 1.0) * PIXEL_SCALE)
        enforce(bool(np.all((array >= 0) & (array <= 255))), "Values must fit in one byte", DataFormatError)
        array = array.astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    content = struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(content)
    return path


def class_means(seed: int, d: int, classes: int, separation: float) -> Tensor:
    """
    Fixed class means of the synthetic task.

    With classes <= d the means are separation * e_c; otherwise they are drawn
    uniformly on the sphere of radius separation.
    """
    if classes <= d:
        return separation * np.eye(classes, d)
    directions = sample_normal(RngStream(seed).derive("class-means"), (classes, d))
    return separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)


def synth_dataset(
    seed: int, n: int, d: int, classes: int, separation: float = 3.0, radial: bool = False
) -> Tuple[Tensor, np.ndarray]:
    """
    Gaussian class blobs, or concentric shells when radial is set.

    Blobs have unit standard deviation around class_means. Radial classes put
    class c on the shell of radius separation * (c + 1) with unit-variance noise,
    which no linear rule separates. Labels are balanced and shuffled.

    :return: [n x d] inputs and int64 labels.
    """
    enforce(n >= classes >= 2, f"Need n >= classes >= 2, got n={n}, classes={classes}", DataError)
    enforce(d >= 1, f"Need d >= 1, got {d}", DataError)
    enforce(separation > 0, f"separation must be positive, got {separation}", DataError)
    rng = RngStream(seed).derive("synthetic")
    labels = np.arange(n, dtype=np.int64) % classes
    labels = labels[permutation(rng, n)]
    noise = sample_normal(rng, (n, d))
    if radial:
        directions = sample_normal(rng, (n, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = separation * (labels + 1.0)
        return radii[:, None] * directions + noise, labels
    return class_means(seed, d, classes, separation)[labels] + noise, labels


def minibatches(rng: RngStream, n: int, batch_size: int) -> List[np.ndarray]:
    """
    Shuffled index batches covering range(n) once.

    A trailing batch of a single example joins the previous batch so that batch
    statistics always see at least two rows.
    """
    enforce(n >= 1 and batch_size >= 1, f"Invalid batching n={n}, batch_size={batch_size}", DataError)
    order = permutation(rng, n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


@dataclass(frozen=True)
class Dataset:
    """Train/test split with flattened inputs."""

    x_train: Tensor
    y_train: np.ndarray
    x_test: Tensor
    y_test: np.ndarray
    input_shape: Tuple[int, ...]
    classes: int

    @property
    def dim(self) -> int:
        """Flattened input size."""
        return int(self.x_train.shape[1])


def load_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Materialize the configured dataset, ZCA-whitened when requested."""
    if spec.kind is DatasetKind.SYNTHETIC:
        x, y = synth_dataset(seed, spec.n_train + spec.n_test, spec.dim, spec.classes, spec.separation, spec.radial)
        x_train, y_train = x[: spec.n_train], y[: spec.n_train]
        x_test, y_test = x[spec.n_train :], y[spec.n_train :]
        input_shape: Tuple[int, ...] = (spec.dim,)
        classes = spec.classes
    else:
        images, y_train = load_idx(spec.train_images, spec.train_labels)
        test_images, y_test = load_idx(spec.test_images, spec.test_labels)
        if images.shape[1:] != test_images.shape[1:]:
            raise DataConsistencyError(f"Train images are {images.shape[1:]} but test images are {test_images.shape[1:]}")
        images, y_train = images[: spec.train_size], y_train[: spec.train_size]
        test_images, y_test = test_images[: spec.test_size], y_test[: spec.test_size]
        x_train = images.reshape(images.shape[0], -1)
        x_test = test_images.reshape(test_images.shape[0], -1)
        input_shape = (1, *images.shape[1:])
        classes = int(max(y_train.max(), y_test.max())) + 1
        enforce(classes >= 2, "IDX labels must span at least two classes", DataError)
    if spec.zca:
        _logger.info(f"Fitting ZCA whitening on {x_train.shape[0]} x {x_train.shape[1]} training inputs")
        x_train, transform, mean = zca_whiten(x_train, spec.zca_eps)
        x_test = apply_zca(x_test, transform, mean)
    _logger.info(f"Loaded {spec.kind.value} data: {x_train.shape[0]} train, {x_test.shape[0]} test, {classes} classes")
    return Dataset(x_train, y_train, x_test, y_test, input_shape, classes)

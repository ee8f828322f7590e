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

"""This module contains the dense tensor kernel every other module builds on."""

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple, TypeVar, Union

import numpy as np
from aea.exceptions import enforce

from packages.valory.weightnorm.exceptions import DimensionError


Tensor = np.ndarray
Axis = Union[int, Sequence[int]]
T = TypeVar("T")

JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 100
SEED_MASK = (1 << 64) - 1


def as_tensor(value: object) -> Tensor:
    """Return the value as a 64-bit float array."""
    return np.asarray(value, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Multiply two matrices.

    :param a: left operand of shape [m x k].
    :param b: right operand of shape [k x n].
    :return: the [m x n] product.
    """
    a, b = as_tensor(a), as_tensor(b)
    enforce(
        a.ndim == 2 and b.ndim == 2,
        f"matmul expects matrices, got shapes {a.shape} and {b.shape}",
        DimensionError,
    )
    enforce(
        a.shape[1] == b.shape[0],
        f"Inner dimensions do not agree: {a.shape} x {b.shape}",
        DimensionError,
    )
    return a @ b


def _conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Floor-division output extent of a strided, padded correlation."""
    return (size + 2 * pad - kernel) // stride + 1


def _check_conv(x: Tensor, k: Tensor, stride: int, pad: int) -> Tuple[int, int]:
    """Validate convolution operands and return the output spatial size."""
    enforce(
        x.ndim == 4 and k.ndim == 4,
        f"conv2d expects N x C x H x W input and F x C x kh x kw kernel, got {x.shape} and {k.shape}",
        DimensionError,
    )
    enforce(
        x.shape[1] == k.shape[1],
        f"Channel mismatch between input {x.shape} and kernel {k.shape}",
        DimensionError,
    )
    enforce(stride >= 1 and pad >= 0, "stride must be >= 1 and pad >= 0", DimensionError)
    out_h = _conv_output_size(x.shape[2], k.shape[2], stride, pad)
    out_w = _conv_output_size(x.shape[3], k.shape[3], stride, pad)
    enforce(
        out_h >= 1 and out_w >= 1,
        f"Non-positive conv output size {out_h} x {out_w}",
        DimensionError,
    )
    return out_h, out_w


def _im2col(
    x: Tensor, kh: int, kw: int, stride: int, pad: int, out_h: int, out_w: int
) -> Tensor:
    """Unfold the receptive fields into [N, C*kh*kw, out_h*out_w] columns."""
    n, c = x.shape[:2]
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, out_h, out_w))
    for i in range(kh):
        i_end = i + stride * out_h
        for j in range(kw):
            j_end = j + stride * out_w
            cols[:, :, i, j] = padded[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(
    cols: Tensor,
    x_shape: Tuple[int, ...],
    kh: int,
    kw: int,
    stride: int,
    pad: int,
    out_h: int,
    out_w: int,
) -> Tensor:
    """Fold columns back, summing overlapping receptive fields."""
    n, c, h, w = x_shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        i_end = i + stride * out_h
        for j in range(kw):
            j_end = j + stride * out_w
            padded[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    return padded[:, :, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """
    Cross-correlate a batch of images with a filter bank (no kernel flip).

    :param x: input of shape [N x C x H x W].
    :param k: filters of shape [F x C x kh x kw].
    :param stride: step between receptive fields.
    :param pad: zero padding added on every spatial border.
    :return: output of shape [N x F x H' x W'].
    """
    x, k = as_tensor(x), as_tensor(k)
    out_h, out_w = _check_conv(x, k, stride, pad)
    f, _, kh, kw = k.shape
    cols = _im2col(x, kh, kw, stride, pad, out_h, out_w)
    out = np.matmul(k.reshape(f, -1), cols)
    return out.reshape(x.shape[0], f, out_h, out_w)


def conv2d_backward(
    grad_out: Tensor, x: Tensor, k: Tensor, stride: int = 1, pad: int = 0
) -> Tuple[Tensor, Tensor]:
    """Return the gradients of conv2d with respect to its input and its filters."""
    x, k = as_tensor(x), as_tensor(k)
    out_h, out_w = _check_conv(x, k, stride, pad)
    n = x.shape[0]
    f, _, kh, kw = k.shape
    enforce(
        grad_out.shape == (n, f, out_h, out_w),
        f"Gradient shape {grad_out.shape} does not match conv output",
        DimensionError,
    )
    cols = _im2col(x, kh, kw, stride, pad, out_h, out_w)
    grad = grad_out.reshape(n, f, out_h * out_w)
    grad_k = np.matmul(grad, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape)
    grad_cols = np.matmul(k.reshape(f, -1).T, grad)
    grad_x = _col2im(grad_cols, x.shape, kh, kw, stride, pad, out_h, out_w)
    return grad_x, grad_k


def max_pool2d(x: Tensor, size: int = 2) -> Tuple[Tensor, Tensor]:
    """
    Non-overlapping max pooling with stride equal to the window size.

    Trailing rows/columns that do not fill a window are dropped. Ties go to the
    first element of the window in row-major order.

    :param x: input of shape [N x C x H x W].
    :param size: window side and stride.
    :return: the pooled tensor and the flat in-window index of every maximum.
    """
    x = as_tensor(x)
    enforce(x.ndim == 4, f"max_pool2d expects a 4-d input, got {x.shape}", DimensionError)
    n, c, h, w = x.shape
    out_h, out_w = h // size, w // size
    enforce(out_h >= 1 and out_w >= 1, f"Input {x.shape} smaller than pool window", DimensionError)
    windows = (
        x[:, :, : out_h * size, : out_w * size]
        .reshape(n, c, out_h, size, out_w, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, out_h, out_w, size * size)
    )
    argmax = windows.argmax(axis=-1)
    pooled = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def max_pool2d_backward(
    grad_out: Tensor, argmax: Tensor, x_shape: Tuple[int, ...], size: int = 2
) -> Tensor:
    """Route the pooled gradient back to the selected window elements."""
    n, c, h, w = x_shape
    out_h, out_w = argmax.shape[2:]
    windows = np.zeros((n, c, out_h, out_w, size * size))
    np.put_along_axis(windows, argmax[..., None], grad_out[..., None], axis=-1)
    routed = (
        windows.reshape(n, c, out_h, out_w, size, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, out_h * size, out_w * size)
    )
    grad_x = np.zeros((n, c, h, w))
    grad_x[:, :, : out_h * size, : out_w * size] = routed
    return grad_x


def global_avg_pool(x: Tensor) -> Tensor:
    """Average every channel over its spatial positions: [N x C x H x W] -> [N x C]."""
    x = as_tensor(x)
    enforce(x.ndim == 4, f"global_avg_pool expects a 4-d input, got {x.shape}", DimensionError)
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: Tensor, x_shape: Tuple[int, ...]) -> Tensor:
    """Spread the pooled gradient evenly over the spatial positions."""
    h, w = x_shape[2:]
    spread = grad_out[:, :, None, None] / (h * w)
    return np.broadcast_to(spread, x_shape).copy()


def _normalize_axis(t: Tensor, axis: Axis) -> Tuple[int, ...]:
    """Return the reduction axes as a tuple of non-negative integers."""
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    enforce(len(axes) > 0, "Reduction axis must not be empty", DimensionError)
    enforce(
        all(-t.ndim <= a < t.ndim for a in axes),
        f"Axis {axis} out of range for shape {t.shape}",
        DimensionError,
    )
    normalized = tuple(int(a) % t.ndim for a in axes)
    extent = int(np.prod([t.shape[a] for a in normalized]))
    enforce(extent >= 1, f"Empty reduction over axis {axis}", DimensionError)
    return normalized


def mean_std(t: Tensor, axis: Axis = 0) -> Tuple[Tensor, Tensor]:
    """
    Mean and population (divide-by-n) standard deviation over the given axes.

    :param t: input tensor.
    :param axis: axis or axes reduced away.
    :return: mean and standard deviation per remaining index.
    """
    t = as_tensor(t)
    axes = _normalize_axis(t, axis)
    mean = t.mean(axis=axes)
    std = np.sqrt(np.square(t - t.mean(axis=axes, keepdims=True)).mean(axis=axes))
    return mean, std


def covariance(x: Tensor) -> Tensor:
    """Population covariance of the rows of an [n x d] matrix."""
    x = as_tensor(x)
    enforce(x.ndim == 2 and x.shape[0] >= 1, f"covariance expects [n x d], got {x.shape}", DimensionError)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    return (cov + cov.T) / 2.0


def _rotate(a: Tensor, vectors: Tensor, p: int, q: int, c: float, s: float) -> None:
    """Apply the Jacobi rotation J(p, q) as a <- J^T a J and vectors <- vectors J."""
    col_p, col_q = a[:, p].copy(), a[:, q].copy()
    a[:, p] = c * col_p - s * col_q
    a[:, q] = s * col_p + c * col_q
    row_p, row_q = a[p, :].copy(), a[q, :].copy()
    a[p, :] = c * row_p - s * row_q
    a[q, :] = s * row_p + c * row_q
    a[p, q] = a[q, p] = 0.0
    vec_p, vec_q = vectors[:, p].copy(), vectors[:, q].copy()
    vectors[:, p] = c * vec_p - s * vec_q
    vectors[:, q] = s * vec_p + c * vec_q


def jacobi_eigh(
    a: Tensor, tol: float = JACOBI_TOLERANCE, max_sweeps: int = JACOBI_MAX_SWEEPS
) -> Tuple[Tensor, Tensor]:
    """
    Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius mass is at most tol times the
    Frobenius norm of the matrix.

    :param a: symmetric [d x d] matrix.
    :param tol: relative off-diagonal tolerance.
    :param max_sweeps: maximum number of full sweeps.
    :return: ascending eigenvalues and the matching eigenvectors as columns.
    """
    a = as_tensor(a)
    enforce(
        a.ndim == 2 and a.shape[0] == a.shape[1],
        f"jacobi_eigh expects a square matrix, got {a.shape}",
        DimensionError,
    )
    scale = float(np.sqrt(np.sum(a * a)))
    enforce(
        bool(np.all(np.abs(a - a.T) <= 1e-10 * max(scale, 1.0))),
        "jacobi_eigh expects a symmetric matrix",
        DimensionError,
    )
    a = (a + a.T) / 2.0
    n = a.shape[0]
    vectors = np.eye(n)
    for _ in range(max_sweeps):
        off = float(np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                _rotate(a, vectors, p, q, c, t * c)
    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues, kind="stable")
    return eigenvalues[order], vectors[:, order]


def zca_whiten(x: Tensor, eps: float = 1e-8) -> Tuple[Tensor, Tensor, Tensor]:
    """
    ZCA-whiten the rows of an [n x d] matrix against their own statistics.

    The transform is W = U diag(1 / sqrt(lambda + eps)) U^T computed from the
    population covariance; the output is (x - mean) W.

    :param x: data matrix.
    :param eps: eigenvalue regularizer, > 0.
    :return: the whitened data, the transform W and the mean.
    """
    x = as_tensor(x)
    enforce(x.ndim == 2, f"zca_whiten expects [n x d], got {x.shape}", DimensionError)
    enforce(bool(np.all(np.isfinite(x))), "zca_whiten received non-finite values", ValueError)
    enforce(eps > 0, f"eps must be positive, got {eps}", ValueError)
    mean = x.mean(axis=0)
    eigenvalues, vectors = jacobi_eigh(covariance(x))
    scales = 1.0 / np.sqrt(np.maximum(eigenvalues, 0.0) + eps)
    transform = (vectors * scales) @ vectors.T
    return apply_zca(x, transform, mean), transform, mean


def apply_zca(x: Tensor, transform: Tensor, mean: Tensor) -> Tensor:
    """Apply a fitted ZCA transform to new rows."""
    return (as_tensor(x) - mean) @ transform


def _counter_to_int(counter: Sequence[int]) -> int:
    """Pack a Philox little-endian word counter into one integer."""
    return sum(int(word) << (64 * i) for i, word in enumerate(counter))


@dataclass
class RngStream:
    """
    Counter-based random stream.

    Draws come from numpy's Philox generator keyed by (seed, stream) and started
    at counter; after every draw the counter moves to the generator's post-draw
    counter, so a (seed, stream, counter) triple fixes the sequence that follows.
    """

    seed: int
    counter: int = 0
    stream: int = 0

    @property
    def key(self) -> int:
        """The 128-bit Philox key."""
        return (self.seed & SEED_MASK) | ((self.stream & SEED_MASK) << 64)

    def draw(self, sampler: Callable[[np.random.Generator], T]) -> T:
        """Run a sampler against the stream and advance the counter."""
        bit_generator = np.random.Philox(key=self.key, counter=self.counter)
        result = sampler(np.random.Generator(bit_generator))
        self.counter = _counter_to_int(bit_generator.state["state"]["counter"])
        return result

    def derive(self, name: str) -> "RngStream":
        """Independent stream for a named purpose, starting at counter 0."""
        digest = hashlib.sha256(f"{self.stream}/{name}".encode("utf-8")).digest()
        return RngStream(seed=self.seed, counter=0, stream=int.from_bytes(digest[:8], "little"))

    def copy(self) -> "RngStream":
        """Snapshot of the current position."""
        return RngStream(seed=self.seed, counter=self.counter, stream=self.stream)


def sample_normal(
    rng: RngStream, shape: Union[int, Sequence[int]], mean: float = 0.0, std: float = 1.0
) -> Tensor:
    """Draw i.i.d. Gaussian values and advance the stream."""
    enforce(std >= 0, f"std must be non-negative, got {std}", ValueError)
    noise = rng.draw(lambda generator: generator.standard_normal(shape))
    return mean + std * noise


def permutation(rng: RngStream, n: int) -> np.ndarray:
    """Random permutation of range(n)."""
    return rng.draw(lambda generator: generator.permutation(n))

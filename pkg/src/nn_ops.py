"""
Neural-network operations on Tensors: convolutions, pooling, dense layers and
the log-softmax / negative log-likelihood pair.

Convolutions are computed by unfolding the zero-padded input into columns
(``sliding_window_view``) and a single matrix product; backward folds the
column gradient back one kernel tap at a time.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .error_handler import ContractViolation, InvalidShapeError
from .tensor import Tensor, make_result, matmul, relu, transpose


def conv1d_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """x: (C_in, L), weight: (C_out, C_in, K), bias: (C_out,) -> (C_out, L_out)."""
    if x.ndim != 2 or weight.ndim != 3:
        raise InvalidShapeError("conv1d expects (C_in, L) and (C_out, C_in, K)", x.shape, weight.shape)
    c_in, length = x.shape
    c_out, w_in, kernel = weight.shape
    if w_in != c_in:
        raise InvalidShapeError(
            f"conv1d channel mismatch: input has {c_in}, weight expects {w_in}",
            x.shape,
            weight.shape,
        )
    if stride < 1 or padding < 0:
        raise InvalidShapeError(f"conv1d stride={stride} padding={padding}")
    if length + 2 * padding < kernel:
        raise InvalidShapeError(
            f"conv1d input length {length} + 2*{padding} shorter than kernel {kernel}",
            x.shape,
        )
    if bias is not None and bias.shape != (c_out,):
        raise InvalidShapeError("conv1d bias must be (C_out,)", bias.shape)

    l_out = conv1d_output_length(length, kernel, stride, padding)
    padded = np.pad(x.data, ((0, 0), (padding, padding)))
    windows = sliding_window_view(padded, kernel, axis=1)[:, ::stride][:, :l_out]
    cols = np.ascontiguousarray(windows.transpose(1, 0, 2)).reshape(l_out, c_in * kernel)
    wmat = weight.data.reshape(c_out, c_in * kernel)
    out = wmat @ cols.T
    if bias is not None:
        out = out + bias.data[:, None]

    def rule(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_w = (g @ cols).reshape(weight.shape)
        grad_cols = (wmat.T @ g).reshape(c_in, kernel, l_out)
        grad_padded = np.zeros_like(padded)
        span = stride * (l_out - 1) + 1
        for k in range(kernel):
            grad_padded[:, k : k + span : stride] += grad_cols[:, k, :]
        grad_x = grad_padded[:, padding : padding + length]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=1)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv1d", out, inputs, rule)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """x: (C_in, H, W), weight: (C_out, C_in, KH, KW) -> (C_out, H_out, W_out)."""
    if x.ndim != 3 or weight.ndim != 4:
        raise InvalidShapeError(
            "conv2d expects (C_in, H, W) and (C_out, C_in, KH, KW)", x.shape, weight.shape
        )
    c_in, height, width = x.shape
    c_out, w_in, kh, kw = weight.shape
    if w_in != c_in:
        raise InvalidShapeError(
            f"conv2d channel mismatch: input has {c_in}, weight expects {w_in}",
            x.shape,
            weight.shape,
        )
    if stride < 1 or padding < 0:
        raise InvalidShapeError(f"conv2d stride={stride} padding={padding}")
    if height + 2 * padding < kh or width + 2 * padding < kw:
        raise InvalidShapeError("conv2d input smaller than kernel", x.shape, weight.shape)
    if bias is not None and bias.shape != (c_out,):
        raise InvalidShapeError("conv2d bias must be (C_out,)", bias.shape)

    h_out = (height + 2 * padding - kh) // stride + 1
    w_out = (width + 2 * padding - kw) // stride + 1
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[
        :, ::stride, ::stride
    ][:, :h_out, :w_out]
    cols = np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(
        h_out * w_out, c_in * kh * kw
    )
    wmat = weight.data.reshape(c_out, c_in * kh * kw)
    out = (wmat @ cols.T).reshape(c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def rule(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        g2 = g.reshape(c_out, h_out * w_out)
        grad_w = (g2 @ cols).reshape(weight.shape)
        grad_cols = (wmat.T @ g2).reshape(c_in, kh, kw, h_out, w_out)
        grad_padded = np.zeros_like(padded)
        span_h = stride * (h_out - 1) + 1
        span_w = stride * (w_out - 1) + 1
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, i : i + span_h : stride, j : j + span_w : stride] += grad_cols[
                    :, i, j
                ]
        grad_x = grad_padded[:, padding : padding + height, padding : padding + width]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(1, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, inputs, rule)


def pooled_extent(extent: int, kernel: int = 2, ceil_mode: bool = True) -> int:
    return math.ceil(extent / kernel) if ceil_mode else extent // kernel


def maxpool2d(x: Tensor, kernel: int = 2, ceil_mode: bool = True) -> Tensor:
    """
    Non-overlapping max-pooling over (C, H, W) with stride equal to the kernel.

    In ceil mode a trailing partial window pools over the elements it covers.
    The argmax of each window is recorded for the backward pass.
    """
    if x.ndim != 3:
        raise InvalidShapeError("maxpool2d expects (C, H, W)", x.shape)
    channels, height, width = x.shape
    h_out = pooled_extent(height, kernel, ceil_mode)
    w_out = pooled_extent(width, kernel, ceil_mode)
    if h_out < 1 or w_out < 1:
        raise InvalidShapeError(f"maxpool2d kernel {kernel} larger than input", x.shape)

    h_full, w_full = h_out * kernel, w_out * kernel
    grid = np.full((channels, h_full, w_full), -np.inf, dtype=x.data.dtype)
    h_take, w_take = min(height, h_full), min(width, w_full)
    grid[:, :h_take, :w_take] = x.data[:, :h_take, :w_take]
    blocks = (
        grid.reshape(channels, h_out, kernel, w_out, kernel)
        .transpose(0, 1, 3, 2, 4)
        .reshape(channels, h_out, w_out, kernel * kernel)
    )
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        grad_blocks = np.zeros((channels, h_out, w_out, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(grad_blocks, argmax[..., None], g[..., None], axis=-1)
        grad_grid = (
            grad_blocks.reshape(channels, h_out, w_out, kernel, kernel)
            .transpose(0, 1, 3, 2, 4)
            .reshape(channels, h_full, w_full)
        )
        grad_x = np.zeros(x.shape, dtype=g.dtype)
        grad_x[:, :h_take, :w_take] = grad_grid[:, :h_take, :w_take]
        return (grad_x,)

    return make_result("maxpool2d", out, (x,), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x: (..., in), weight: (out, in), bias: (out,)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise InvalidShapeError("linear input/weight mismatch", x.shape, weight.shape)
    out = matmul(x, transpose(weight))
    return out if bias is None else out + bias


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log(sum(exp(x))) along ``axis``; the axis is removed."""
    peak = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (peak + np.log(total)).squeeze(axis=axis)
    softmax = shifted / total

    return make_result(
        "logsumexp", out, (x,), lambda g: (np.expand_dims(g, axis) * softmax,)
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    peak = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - peak
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), rule)


def nll_loss(log_probs: Tensor, target: int | np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood.

    log_probs is (C,) with an int target, or (N, C) with N integer targets.
    """
    n_classes = log_probs.shape[-1]
    targets = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ContractViolation(f"targets out of range [0, {n_classes})")
    if log_probs.ndim == 1:
        if targets.size != 1:
            raise InvalidShapeError("one target expected for 1-D log-probs", log_probs.shape)
        return -log_probs[int(targets[0])]
    if log_probs.ndim != 2 or targets.shape != (log_probs.shape[0],):
        raise InvalidShapeError("nll_loss expects (N, C) and N targets", log_probs.shape)
    picked = log_probs[np.arange(targets.size), targets]
    return -(picked.mean())


def cross_entropy(logits: Tensor, target: int | np.ndarray) -> Tensor:
    return nll_loss(log_softmax(logits, axis=-1), target)


def channel_norm(
    x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize every frame of a (C, L) map over its channels, then rescale per channel."""
    centered = x - x.mean(axis=0, keepdims=True)
    variance = (centered * centered).mean(axis=0, keepdims=True)
    normed = centered * (variance + eps) ** -0.5
    return normed * scale.reshape(-1, 1) + shift.reshape(-1, 1)


__all__ = [
    "channel_norm",
    "conv1d",
    "conv1d_output_length",
    "conv2d",
    "cross_entropy",
    "linear",
    "log_softmax",
    "logsumexp",
    "maxpool2d",
    "nll_loss",
    "pooled_extent",
    "relu",
]

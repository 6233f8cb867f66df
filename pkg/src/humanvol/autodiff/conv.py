"""Strided N-d convolution and transposed convolution (2-D and 3-D).

Layouts follow the usual channels-first convention: inputs are
``(N, C, *spatial)`` with an optional missing batch axis, conv weights are
``(C_out, C_in, *kernel)`` and transposed-conv weights ``(C_in, C_out, *kernel)``.
Both are built on one im2col view (``sliding_window_view``) plus its
scatter-add adjoint.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _windows(xp: np.ndarray, kernel: tuple, stride: int) -> np.ndarray:
    d = len(kernel)
    win = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + d)))
    if stride != 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * d]
    return win


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    d = x.ndim - 2
    return np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * d)


def _conv_forward(x, w, stride, padding):
    d = w.ndim - 2
    win = _windows(_pad_spatial(x, padding), w.shape[2:], stride)
    out = np.tensordot(win, w, axes=([1] + list(range(2 + d, 2 + 2 * d)), [1] + list(range(2, 2 + d))))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv_weight_grad(x, g, kernel, stride, padding):
    """d(conv)/d(weight) for input ``x`` and upstream ``g``; shape (C_g, C_x, *kernel)."""
    d = len(kernel)
    win = _windows(_pad_spatial(x, padding), kernel, stride)
    win = win[(slice(None), slice(None)) + tuple(slice(0, n) for n in g.shape[2:])]
    return np.tensordot(g, win, axes=([0] + list(range(2, 2 + d)), [0] + list(range(2, 2 + d))))


def _conv_input_grad(g, w, stride, padding, in_spatial):
    """Adjoint of the conv im2col: scatter ``g`` back through weight ``w``."""
    kernel = w.shape[2:]
    n, c = g.shape[0], w.shape[1]
    out_spatial = g.shape[2:]
    padded = tuple(s + 2 * padding for s in in_spatial)
    # room for every window position even when the last stride overhangs
    full = tuple(max(p, stride * (o - 1) + k) for p, o, k in zip(padded, out_spatial, kernel))
    acc = np.zeros((n, c) + full, dtype=np.result_type(g, w))
    cols = np.tensordot(w, g, axes=([0], [1]))  # (C, *K, N, *So)
    for offs in itertools.product(*(range(k) for k in kernel)):
        target = (slice(None), slice(None)) + tuple(
            slice(o, o + stride * (s - 1) + 1, stride) for o, s in zip(offs, out_spatial)
        )
        acc[target] += np.swapaxes(cols[(slice(None),) + offs], 0, 1)
    crop = (slice(None), slice(None)) + tuple(slice(padding, padding + s) for s in in_spatial)
    return np.ascontiguousarray(acc[crop])


def _check_rank(x: Tensor, w: Tensor, what: str):
    d = w.ndim - 2
    if d not in (2, 3):
        raise ShapeError(f"{what}: weight must be rank 4 or 5, got shape {w.shape}")
    if x.ndim == d + 1:
        return d, True
    if x.ndim != d + 2:
        raise ShapeError(f"{what}: input shape {x.shape} incompatible with weight shape {w.shape}")
    return d, False


def conv(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; input ``(N, C_in, *S)`` or ``(C_in, *S)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    d, unbatched = _check_rank(x, weight, "conv")
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv: input has {x.shape[1]} channels but weight {weight.shape} expects {weight.shape[1]}"
        )
    kernel = weight.shape[2:]
    in_spatial = x.shape[2:]
    for s, k in zip(in_spatial, kernel):
        if s + 2 * padding < k:
            raise ShapeError(f"conv: spatial extent {in_spatial} too small for kernel {kernel}")
    out = _conv_forward(x.data, weight.data, stride, padding)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape((1, -1) + (1,) * d)
        parents.append(bias)

    def backward(g):
        gx = _conv_input_grad(g, weight.data, stride, padding, in_spatial) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, kernel, stride, padding) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + d))))
        return tuple(grads)

    y = Tensor._make(out, parents, backward)
    return y.reshape(y.shape[1:]) if unbatched else y


def conv_transpose(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution (the adjoint of :func:`conv` in its input)."""
    x, weight = as_tensor(x), as_tensor(weight)
    d, unbatched = _check_rank(x, weight, "conv_transpose")
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv_transpose: input has {x.shape[1]} channels but weight {weight.shape} expects {weight.shape[0]}"
        )
    kernel = weight.shape[2:]
    out_spatial = tuple(conv_transpose_output_size(s, k, stride, padding) for s, k in zip(x.shape[2:], kernel))
    if min(out_spatial) < 1:
        raise ShapeError(f"conv_transpose: empty output for input {x.shape} and kernel {kernel}")
    out = _conv_input_grad(x.data, weight.data, stride, padding, out_spatial)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape((1, -1) + (1,) * d)
        parents.append(bias)

    def backward(g):
        gx = _conv_forward(g, weight.data, stride, padding) if x.requires_grad else None
        if gx is not None and gx.shape != x.shape:
            gx = gx[(slice(None), slice(None)) + tuple(slice(0, s) for s in x.shape[2:])]
        gw = _conv_weight_grad(g, x.data, kernel, stride, padding) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + d))))
        return tuple(grads)

    y = Tensor._make(out, parents, backward)
    return y.reshape(y.shape[1:]) if unbatched else y


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    if as_tensor(weight).ndim != 4:
        raise ShapeError("conv2d expects a rank-4 weight")
    return conv(x, weight, bias, stride, padding)


def conv3d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    if as_tensor(weight).ndim != 5:
        raise ShapeError("conv3d expects a rank-5 weight")
    return conv(x, weight, bias, stride, padding)


def transposed_conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    if as_tensor(weight).ndim != 4:
        raise ShapeError("transposed_conv2d expects a rank-4 weight")
    return conv_transpose(x, weight, bias, stride, padding)


def transposed_conv3d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    if as_tensor(weight).ndim != 5:
        raise ShapeError("transposed_conv3d expects a rank-5 weight")
    return conv_transpose(x, weight, bias, stride, padding)

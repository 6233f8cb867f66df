"""Differentiable geometric layers: feature modulation and volume projections.

Tensor layouts (leading batch axes optional): volumes ``(..., X, Y, Z)`` or
``(N, C, X, Y, Z)``, image-plane maps ``(..., H, W)`` with ``H = Y`` and
``W = X``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    amax,
    amin,
    as_tensor,
    concat,
    conv2d,
    leaky_relu,
    pad,
    sqrt,
    stack,
    where,
)

LRELU_SLOPE = 0.2


def background_depth(z_extent: int) -> float:
    """The large constant standing in for "no surface" in depth volumes."""
    return 2.0 * z_extent


@dataclass
class ModulationPair:
    alpha: Tensor
    beta: Tensor


def vft_modulators(feature_map: Tensor, w_alpha, b_alpha, w_beta, b_beta,
                   slice_shape: tuple[int, int] | None = None) -> ModulationPair:
    """Map an encoder feature map ``(N, C, H, W)`` to per-slice modulation ``(N, C, X, Y)``.

    Each branch is a 3x3 stride-1 convolution followed by leaky ReLU.
    """
    fm = as_tensor(feature_map)
    alpha = leaky_relu(conv2d(fm, w_alpha, b_alpha, 1, 1), LRELU_SLOPE)
    beta = leaky_relu(conv2d(fm, w_beta, b_beta, 1, 1), LRELU_SLOPE)
    nd = alpha.ndim
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    alpha, beta = alpha.transpose(perm), beta.transpose(perm)
    if slice_shape is not None and tuple(alpha.shape[-2:]) != tuple(slice_shape):
        raise ShapeError(
            f"modulation maps {alpha.shape[-2:]} do not match volume slice shape {tuple(slice_shape)}"
        )
    return ModulationPair(alpha, beta)


def vft_apply(volume: Tensor, mods: ModulationPair) -> Tensor:
    """Apply the same affine modulation ``alpha * v + beta`` to every z-slice."""
    volume = as_tensor(volume)
    a, b = as_tensor(mods.alpha), as_tensor(mods.beta)
    if a.shape != b.shape:
        raise ShapeError(f"alpha {a.shape} and beta {b.shape} differ")
    if tuple(volume.shape[:-1]) != tuple(a.shape):
        raise ShapeError(f"modulation {a.shape} does not match volume z-slice {volume.shape[:-1]}")
    a = a.reshape(a.shape + (1,))
    b = b.reshape(b.shape + (1,))
    return volume * a + b


def depth_volume(occupancy: Tensor, background: float | None = None) -> Tensor:
    """``M * (1 - V) + z * V`` along the last (z) axis."""
    occ = as_tensor(occupancy)
    Z = occ.shape[-1]
    M = background_depth(Z) if background is None else background
    z = np.arange(Z, dtype=occ.dtype)
    return (1.0 - occ) * M + occ * z


def _swap_last(t: Tensor) -> Tensor:
    nd = t.ndim
    return t.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))


def project_depth(occupancy: Tensor, background: float | None = None) -> Tensor:
    """Front depth map ``(..., H=Y, W=X)`` as the z-minimum of the depth volume.

    The gradient reaches only the arg-min voxel; ties go to the smallest z.
    """
    return _swap_last(amin(depth_volume(occupancy, background), axis=-1))


def project_depth_scan(occupancy: np.ndarray, background: float | None = None) -> np.ndarray:
    """Reference depth: index of the first occupied voxel along each +z ray."""
    occ = np.asarray(occupancy) >= 1
    Z = occ.shape[-1]
    M = background_depth(Z) if background is None else background
    out = np.full(occ.shape[:-1], M, dtype=float)
    it = np.ndindex(*occ.shape[:-1])
    for idx in it:
        hits = np.flatnonzero(occ[idx])
        if len(hits):
            out[idx] = hits[0]
    return np.swapaxes(out, -1, -2)


def project_silhouette(occupancy: Tensor, axis: str = "front") -> Tensor:
    """Orthographic max projection: front -> ``(..., Y, X)``, side -> ``(..., Y, Z)``."""
    occ = as_tensor(occupancy)
    if axis == "front":
        return _swap_last(amax(occ, axis=-1))
    if axis == "side":
        return amax(occ, axis=-3)
    raise ValueError(f"axis must be 'front' or 'side', got {axis!r}")


def depth_to_vertex(depth: Tensor) -> Tensor:
    """Vertex map ``(..., 3, H, W)`` holding (column, row, depth) per pixel."""
    d = as_tensor(depth)
    H, W = d.shape[-2:]
    xs = np.broadcast_to(np.arange(W, dtype=d.dtype), d.shape).copy()
    ys = np.broadcast_to(np.arange(H, dtype=d.dtype)[:, None], d.shape).copy()
    return stack([Tensor(xs), Tensor(ys), d], axis=-3)


def _sobel(t: Tensor) -> tuple[Tensor, Tensor]:
    """3x3 Sobel derivatives along W (x) and H (y), reflective border."""
    H, W = t.shape[-2:]
    lead = [(0, 0)] * (t.ndim - 2)
    p = pad(t, lead + [(1, 1), (1, 1)], mode="reflect")

    def s(r, c):
        return p[..., r:r + H, c:c + W]

    gx = (s(0, 2) - s(0, 0)) + (s(1, 2) - s(1, 0)) * 2.0 + (s(2, 2) - s(2, 0))
    gy = (s(2, 0) - s(0, 0)) + (s(2, 1) - s(0, 1)) * 2.0 + (s(2, 2) - s(0, 2))
    return gx, gy


def background_adjacent(depth: np.ndarray, background_level: float) -> np.ndarray:
    """True where any depth in the 3x3 (reflect-padded) window is background."""
    bg = np.asarray(depth) >= background_level
    lead = [(0, 0)] * (bg.ndim - 2)
    p = np.pad(bg, lead + [(1, 1), (1, 1)], mode="reflect")
    H, W = bg.shape[-2:]
    out = np.zeros_like(bg)
    for r in range(3):
        for c in range(3):
            out |= p[..., r:r + H, c:c + W]
    return out


def vertex_to_normal(vertex_map: Tensor, background_level: float | None = None) -> Tensor:
    """Unit normals ``(..., 3, H, W)`` from the cross product of Sobel derivatives.

    Normals face the camera (negative z).  Pixels whose Sobel window touches
    a depth at or beyond ``background_level`` and pixels with a vanishing
    cross product are set to the zero vector.
    """
    vm = as_tensor(vertex_map)
    comps = [vm[..., i, :, :] for i in range(3)]
    gx, gy = zip(*(_sobel(c) for c in comps))
    nx = gx[1] * gy[2] - gx[2] * gy[1]
    ny = gx[2] * gy[0] - gx[0] * gy[2]
    nz = gx[0] * gy[1] - gx[1] * gy[0]
    flip = np.where(nz.data > 0, -1.0, 1.0).astype(vm.dtype)
    n = stack([nx * flip, ny * flip, nz * flip], axis=-3)
    norm2 = (n * n).sum(axis=-3, keepdims=True)
    valid = norm2.data > 1e-24
    if background_level is not None:
        valid = valid & ~background_adjacent(vm.data[..., 2, :, :], background_level)[..., None, :, :]
    safe = sqrt(where(valid, norm2, 1.0))
    return where(np.broadcast_to(valid, n.shape), n / safe, 0.0)


def depth_to_normal(depth: Tensor, background_level: float | None = None) -> Tensor:
    return vertex_to_normal(depth_to_vertex(depth), background_level)


def upsample2x(image: Tensor) -> Tensor:
    """Bilinear 2x upsampling of the last two axes.

    Output sample ``j`` reads input position ``j / 2`` (edge-clamped), so even
    outputs copy inputs and odd outputs average neighbours.
    """
    t = as_tensor(image)
    for ax in (-1, -2):
        n = t.shape[ax]
        idx_next = [slice(None)] * t.ndim
        idx_next[ax] = slice(1, n)
        idx_last = [slice(None)] * t.ndim
        idx_last[ax] = slice(n - 1, n)
        nxt = concat([t[tuple(idx_next)], t[tuple(idx_last)]], axis=ax % t.ndim)
        mid = (t + nxt) * 0.5
        pair = stack([t, mid], axis=(ax % t.ndim) + 1)
        shape = list(t.shape)
        shape[ax] = 2 * n
        t = pair.reshape(tuple(shape))
    return t

"""Orthographic triangle sampling at integer pixel centres along +z.

Point-in-triangle decisions use edge functions with a symbolic perturbation
of the sample point by (eps, eps^2): a sample lying exactly on an edge is
assigned to exactly one of the two triangles sharing it, so ray-parity counts
stay correct on watertight meshes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Coverage:
    """All (triangle, pixel) hits: pixel coords, face ids, barycentrics and depth."""

    px: np.ndarray
    py: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    z: np.ndarray


def _edge_sign(ux, uy, vx, vy, px, py):
    """Sign of orient(u, v, p) under the (eps, eps^2) perturbation of p; never zero."""
    # canonical direction so shared edges evaluate bit-identically
    swap = (ux > vx) | ((ux == vx) & (uy > vy))
    ax = np.where(swap, vx, ux)
    ay = np.where(swap, vy, uy)
    bx = np.where(swap, ux, vx)
    by = np.where(swap, uy, vy)
    o = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    tie = np.where(by != ay, -np.sign(by - ay), np.sign(bx - ax))
    s = np.where(o != 0, np.sign(o), tie)
    return np.where(swap, -s, s), np.where(swap, -o, o)


def coverage(triangles: np.ndarray, width: int, height: int) -> Coverage:
    """Every pixel centre (x, y) in [0, width) x [0, height) covered by each triangle."""
    tri = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    empty = Coverage(*(np.zeros(0, np.int64),) * 3, np.zeros((0, 3)), np.zeros(0))
    if len(tri) == 0:
        return empty
    xs, ys = tri[:, :, 0], tri[:, :, 1]
    area = (xs[:, 1] - xs[:, 0]) * (ys[:, 2] - ys[:, 0]) - (xs[:, 2] - xs[:, 0]) * (ys[:, 1] - ys[:, 0])
    x0 = np.clip(np.ceil(xs.min(1)), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(xs.max(1)), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(ys.min(1)), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(ys.max(1)), -1, height - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = np.where(area != 0, bw * bh, 0)
    total = int(counts.sum())
    if total == 0:
        return empty
    face = np.repeat(np.arange(len(tri)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[face] + local % bw[face]
    py = y0[face] + local // bw[face]
    pxf = px.astype(np.float64)
    pyf = py.astype(np.float64)

    t = tri[face]
    sgn = np.sign(area[face])
    signs, orients = [], []
    for i, j in ((1, 2), (2, 0), (0, 1)):
        s, o = _edge_sign(t[:, i, 0], t[:, i, 1], t[:, j, 0], t[:, j, 1], pxf, pyf)
        signs.append(s * sgn)
        orients.append(o)
    inside = (signs[0] > 0) & (signs[1] > 0) & (signs[2] > 0)
    bary = np.stack(orients, axis=1)[inside] / area[face][inside, None]
    face = face[inside]
    z = np.einsum("ij,ij->i", bary, tri[face][:, :, 2])
    return Coverage(px[inside], py[inside], face, bary, z)


@dataclass
class Raster:
    """Front-most surface per pixel; ``face`` is -1 on background."""

    face: np.ndarray
    bary: np.ndarray
    depth: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.face >= 0


def rasterize(triangles: np.ndarray, width: int, height: int) -> Raster:
    """Z-buffer keeping the smallest z (camera looks along +z)."""
    cov = coverage(triangles, width, height)
    face = np.full((height, width), -1, np.int64)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), np.inf)
    if len(cov.face):
        pix = cov.py * width + cov.px
        order = np.lexsort((cov.face, cov.z, pix))
        pix_sorted = pix[order]
        first = order[np.r_[True, pix_sorted[1:] != pix_sorted[:-1]]]
        yy, xx = cov.py[first], cov.px[first]
        face[yy, xx] = cov.face[first]
        bary[yy, xx] = cov.bary[first]
        depth[yy, xx] = cov.z[first]
    return Raster(face, bary, depth)

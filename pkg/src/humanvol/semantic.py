"""Dense semantic representation of a posed body template.

Grid conventions used throughout the package: a volume has extents
``(X, Y, Z)`` with voxel ``(i, j, k)`` centred at grid coordinate
``(i, j, k)``; an image plane map has extents ``(H, W) = (Y, X)`` so pixel
``(row, col)`` sits over grid ``(x=col, y=row)``.  The camera is orthographic
and looks along +z, so smaller z is nearer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .meshes import MeshError, TemplateMesh, check_watertight
from .raster import coverage, rasterize

DEFAULT_VOLUME_DIMS = (128, 192, 128)
DEFAULT_IMAGE_DIMS = (192, 128)


@dataclass(frozen=True)
class FitTransform:
    """Uniform scale + translation from model space into grid coordinates."""

    scale: float
    offset: tuple[float, float, float]

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, float) * self.scale + np.asarray(self.offset)

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, float) - np.asarray(self.offset)) / self.scale

    @classmethod
    def fit(cls, vertices: np.ndarray, dims, margin: float = 0.05) -> "FitTransform":
        """Centre the bounding box in ``dims`` leaving ``margin`` of each extent free."""
        vertices = np.asarray(vertices, float)
        lo, hi = vertices.min(0), vertices.max(0)
        ext = hi - lo
        dims = np.asarray(dims, float)
        usable = dims * (1.0 - 2.0 * margin)
        with np.errstate(divide="ignore"):
            ratios = np.where(ext > 0, usable / np.where(ext > 0, ext, 1.0), np.inf)
        scale = float(ratios.min())
        if not np.isfinite(scale):
            raise MeshError("cannot fit a mesh with zero extent on every axis")
        centre = (dims - 1.0) / 2.0
        offset = centre - scale * (lo + hi) / 2.0
        return cls(scale, tuple(float(o) for o in offset))

    def to_array(self) -> np.ndarray:
        return np.array([self.scale, *self.offset])

    @classmethod
    def from_array(cls, arr) -> "FitTransform":
        arr = np.asarray(arr, float).reshape(-1)
        return cls(float(arr[0]), (float(arr[1]), float(arr[2]), float(arr[3])))


def assign_semantic_codes(mesh: TemplateMesh) -> np.ndarray:
    """Per-vertex codes: rest positions min-max normalised by the rest bounding box."""
    rest = mesh.rest_vertices
    if len(rest) == 0:
        return np.zeros((0, 3))
    lo, hi = rest.min(0), rest.max(0)
    ext = hi - lo
    if np.any(ext <= 0):
        axis = int(np.argmin(ext))
        raise MeshError(f"rest-pose bounding box has zero extent on axis {axis}")
    return np.clip((rest - lo) / ext, 0.0, 1.0)


def _grid_triangles(mesh: TemplateMesh, fit: FitTransform | None) -> np.ndarray:
    v = mesh.vertices if fit is None else fit.apply(mesh.vertices)
    return v[mesh.faces]


def voxelize(mesh: TemplateMesh, dims, fit: FitTransform | None = None) -> np.ndarray:
    """Binary occupancy ``(X, Y, Z)`` by parity of +z ray crossings below each voxel centre."""
    check_watertight(mesh.faces)
    X, Y, Z = (int(d) for d in dims)
    cov = coverage(_grid_triangles(mesh, fit), X, Y)
    hist = np.zeros((X, Y, Z + 1), np.int32)
    if len(cov.z):
        # crossing strictly below centre k  <=>  k >= floor(z) + 1
        k = np.clip(np.floor(cov.z).astype(np.int64) + 1, 0, Z)
        np.add.at(hist, (cov.px, cov.py, k), 1)
    return (np.cumsum(hist[:, :, :Z], axis=2) % 2).astype(np.uint8)


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point to each ``p[i]`` on triangle ``(a[i], b[i], c[i])``.

    Returns (points, barycentric weights). Vectorised region test after
    Ericson, *Real-Time Collision Detection*, 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    w = np.zeros((n, 3))
    done = np.zeros(n, bool)

    def put(mask, wa, wb, wc):
        m = mask & ~done
        w[m, 0], w[m, 1], w[m, 2] = wa[m], wb[m], wc[m]
        done[m] = True

    zero = np.zeros(n)
    one = np.ones(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), one, zero, zero)
        put((d3 >= 0) & (d4 <= d3), zero, one, zero)
        t = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, zero)
        put((d6 >= 0) & (d5 <= d6), zero, zero, one)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, zero, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), zero, 1 - t, t)
        denom = va + vb + vc
        v = vb / denom
        ww = vc / denom
        put(np.ones(n, bool), 1 - v - ww, v, ww)
    w = np.nan_to_num(w)
    pts = w[:, :1] * a + w[:, 1:2] * b + w[:, 2:] * c
    return pts, w


def nearest_surface(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray, chunk: int = 4096):
    """Exact nearest surface point per query: (face index, barycentrics, distance)."""
    points = np.asarray(points, float)
    tri = vertices[faces]
    cent = tri.mean(1)
    radius = float(np.linalg.norm(tri - cent[:, None], axis=2).max())
    tree = cKDTree(cent)
    best_face = np.zeros(len(points), np.int64)
    best_w = np.zeros((len(points), 3))
    best_d = np.full(len(points), np.inf)
    for s in range(0, len(points), chunk):
        q = points[s:s + chunk]
        d0, _ = tree.query(q)
        # any triangle within d0 of q has its centroid within d0 + radius
        cands = tree.query_ball_point(q, d0 + radius + 1e-9)
        lens = np.fromiter((len(c) for c in cands), np.int64, len(cands))
        qi = np.repeat(np.arange(len(q)), lens)
        fi = np.fromiter((f for c in cands for f in c), np.int64, int(lens.sum()))
        t = tri[fi]
        cp, w = closest_point_on_triangles(q[qi], t[:, 0], t[:, 1], t[:, 2])
        dist = np.linalg.norm(cp - q[qi], axis=1)
        order = np.lexsort((fi, dist, qi))
        first = order[np.r_[True, qi[order][1:] != qi[order][:-1]]]
        rows = s + qi[first]
        best_face[rows] = fi[first]
        best_w[rows] = w[first]
        best_d[rows] = dist[first]
    return best_face, best_w, best_d


def build_semantic_volume(
    mesh: TemplateMesh, codes: np.ndarray, dims, fit: FitTransform | None = None,
    occupancy: np.ndarray | None = None,
) -> np.ndarray:
    """``(X, Y, Z, 3)`` volume: occupied voxels carry the code interpolated at the
    nearest surface point, empty voxels are zero."""
    if occupancy is None:
        occupancy = voxelize(mesh, dims, fit)
    vol = np.zeros(tuple(occupancy.shape) + (3,))
    idx = np.argwhere(occupancy > 0)
    if len(idx) == 0:
        return vol
    verts = mesh.vertices if fit is None else fit.apply(mesh.vertices)
    face, w, _ = nearest_surface(idx.astype(float), verts, mesh.faces)
    vals = np.einsum("ij,ijk->ik", w, codes[mesh.faces[face]])
    vol[idx[:, 0], idx[:, 1], idx[:, 2]] = np.clip(vals, 0.0, 1.0)
    return vol


def render_semantic_map(
    mesh: TemplateMesh, codes: np.ndarray, image_dims, fit: FitTransform | None = None
) -> np.ndarray:
    """``(H, W, 3)`` map of front-most interpolated codes; background zero."""
    H, W = (int(d) for d in image_dims)
    out = np.zeros((H, W, 3))
    if len(mesh.faces) == 0:
        return out
    r = rasterize(_grid_triangles(mesh, fit), W, H)
    m = r.mask
    out[m] = np.einsum("ij,ijk->ik", r.bary[m], codes[mesh.faces[r.face[m]]])
    return np.clip(out, 0.0, 1.0)


def render_depth(mesh: TemplateMesh, image_dims, fit: FitTransform | None = None, upscale: int = 1):
    """Front-most depth per pixel (grid z units times ``upscale``); ``inf`` on background.

    With ``upscale=2`` pixel ``(r, c)`` samples grid ``(c/2, r/2)``.
    """
    H, W = (int(d) for d in image_dims)
    tri = _grid_triangles(mesh, fit) * upscale
    return rasterize(tri, W, H)

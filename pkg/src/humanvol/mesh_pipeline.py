"""Isosurface extraction, normal-guided refinement and z-shift IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from skimage import measure

from .meshes import SurfaceMesh, enclosed_volume, face_normals, vertex_neighbors
from .raster import rasterize


def _drop_degenerate(verts: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(faces) == 0:
        return verts, faces
    area = np.linalg.norm(face_normals(verts, faces, normalize=False), axis=1)
    faces = faces[area > 1e-12]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[faces]


def marching_cubes(volume: np.ndarray, iso: float = 0.5) -> SurfaceMesh:
    """Closed, outward-oriented isosurface of an ``(X, Y, Z)`` volume in voxel units."""
    if not 0.0 < iso < 1.0:
        raise ValueError(f"iso must lie in (0, 1), got {iso}")
    vol = np.pad(np.asarray(volume, dtype=np.float64), 1)
    if vol.max() <= iso:
        return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, method="lewiner", allow_degenerate=False)
    verts = verts.astype(np.float64) - 1.0
    faces = faces.astype(np.int64)
    verts, faces = _drop_degenerate(verts, faces)
    if enclosed_volume(verts, faces) < 0:
        faces = faces[:, ::-1].copy()
    return SurfaceMesh(verts, faces)


# -- refinement ---------------------------------------------------------------

def sample_bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an ``(H, W, C)`` image at column ``x`` / row ``y`` (edge-clamped)."""
    H, W = image.shape[:2]
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def front_visible(mesh: SurfaceMesh, plane_dims: tuple[int, int], tolerance: float = 1.0) -> np.ndarray:
    """Vertices within ``tolerance`` of the front-most surface at their pixel."""
    H, W = plane_dims
    if len(mesh.faces) == 0:
        return np.zeros(len(mesh.vertices), bool)
    depth = rasterize(mesh.vertices[mesh.faces], W, H).depth
    px = np.rint(mesh.vertices[:, 0]).astype(np.int64)
    py = np.rint(mesh.vertices[:, 1]).astype(np.int64)
    inside = (px >= 0) & (px < W) & (py >= 0) & (py < H)
    vis = np.zeros(len(mesh.vertices), bool)
    d = depth[py[inside], px[inside]]
    vis[inside] = np.isfinite(d) & (mesh.vertices[inside, 2] <= d + tolerance)
    return vis


def refine_with_normals(
    mesh: SurfaceMesh,
    normal_map: np.ndarray,
    lambda_pos: float = 0.1,
    max_displacement: float = 2.0,
    depth_tolerance: float = 1.0,
) -> SurfaceMesh:
    """Move front-visible vertices so one-ring edges become tangent to the normal map.

    ``normal_map`` is ``(2H, 2W, 3)``: pixel ``(r, c)`` lies over grid
    ``(c/2, r/2)``.  Minimises, in one sparse least-squares solve,
    ``sum lambda_pos |v - v0|^2 + sum_edges <n(v), v - u>^2`` over the free
    vertices; all other vertices stay fixed.  Displacements are clamped to
    ``max_displacement``.
    """
    if lambda_pos < 0:
        raise ValueError("lambda_pos must be non-negative")
    V = mesh.vertices
    n = len(V)
    if n == 0 or len(mesh.faces) == 0:
        return SurfaceMesh(V.copy(), mesh.faces.copy())
    N = np.asarray(normal_map, float)
    plane = (N.shape[0] // 2, N.shape[1] // 2)
    vis = front_visible(mesh, plane, depth_tolerance)
    nv = sample_bilinear(N, 2.0 * V[:, 0], 2.0 * V[:, 1])
    ln = np.linalg.norm(nv, axis=1)
    free = vis & (ln > 1e-6)
    if not free.any() or not np.isfinite(lambda_pos):
        return SurfaceMesh(V.copy(), mesh.faces.copy())
    nv = nv / np.where(ln > 0, ln, 1.0)[:, None]

    col = np.full(n, -1, np.int64)
    col[free] = np.arange(free.sum())
    m = 3 * int(free.sum())
    src, dst = vertex_neighbors(n, mesh.faces)
    keep = free[src]
    src, dst = src[keep], dst[keep]

    rows, cols, vals = [], [], []
    w = np.sqrt(lambda_pos + 1e-12)
    fi = np.flatnonzero(free)
    for k in range(3):
        rows.append(3 * np.arange(len(fi)) + k)
        cols.append(3 * col[fi] + k)
        vals.append(np.full(len(fi), w))
    rhs_pos = (w * V[fi]).reshape(-1)

    e = np.arange(len(src)) + m
    nn = nv[src]
    for k in range(3):
        rows.append(e)
        cols.append(3 * col[src] + k)
        vals.append(nn[:, k])
    dst_free = free[dst]
    for k in range(3):
        rows.append(e[dst_free])
        cols.append(3 * col[dst[dst_free]] + k)
        vals.append(-nn[dst_free, k])
    rhs_edge = np.where(dst_free, 0.0, np.einsum("ij,ij->i", nn, V[dst]))

    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m + len(src), m),
    )
    b = np.concatenate([rhs_pos, rhs_edge])
    x = spsolve((A.T @ A).tocsc(), A.T @ b).reshape(-1, 3)

    out = V.copy()
    d = x - V[fi]
    dl = np.linalg.norm(d, axis=1, keepdims=True)
    scale = np.minimum(1.0, max_displacement / np.maximum(dl, 1e-300))
    out[fi] = V[fi] + d * scale
    return SurfaceMesh(out, mesh.faces.copy())


# -- metric -------------------------------------------------------------------

@dataclass
class IoUReport:
    best_shift: int
    iou: float
    shifts: np.ndarray = field(repr=False)
    curve: np.ndarray = field(repr=False)


def _shifted_iou(pred: np.ndarray, gt: np.ndarray, s: int, total: int) -> float:
    """IoU of ``pred`` moved by ``s`` along z against ``gt``.

    Voxels pushed off the grid cannot match anything but still count in the
    union, which keeps the score symmetric under swapping the arguments.
    """
    Z = pred.shape[2]
    if s >= 0:
        a, b = pred[:, :, :Z - s], gt[:, :, s:]
    else:
        a, b = pred[:, :, -s:], gt[:, :, :Z + s]
    inter = np.count_nonzero(a & b)
    union = total - inter
    return 1.0 if union == 0 else inter / union


def iou_zshift(pred: np.ndarray, gt: np.ndarray, window: int | None = None) -> IoUReport:
    """Best IoU over integer z-shifts of ``pred`` in ``[-window, window]``.

    Voxels pushed outside the grid are dropped from the intersection; both
    empty volumes score 1.
    """
    pred = np.asarray(pred) > 0.5
    gt = np.asarray(gt) > 0.5
    if pred.shape != gt.shape:
        raise ValueError(f"volume dims differ: {pred.shape} vs {gt.shape}")
    Z = pred.shape[2]
    if window is None:
        window = Z // 4
    window = min(int(window), Z - 1)
    shifts = np.arange(-window, window + 1)
    total = np.count_nonzero(pred) + np.count_nonzero(gt)
    curve = np.array([_shifted_iou(pred, gt, int(s), total) for s in shifts])
    # prefer the smallest |shift| among equal scores
    order = np.lexsort((np.abs(shifts), -curve))
    best = order[0]
    return IoUReport(int(shifts[best]), float(curve[best]), shifts, curve)


def shift_z(volume: np.ndarray, s: int) -> np.ndarray:
    """Translate along z by ``s`` voxels, filling with zeros."""
    out = np.zeros_like(volume)
    Z = volume.shape[2]
    if s >= 0:
        out[:, :, s:] = volume[:, :, :Z - s]
    else:
        out[:, :, :Z + s] = volume[:, :, -s:]
    return out

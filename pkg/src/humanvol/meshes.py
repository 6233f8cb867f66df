"""Triangle mesh containers, topology checks, primitives and OBJ I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class TemplateMesh:
    """Posed triangle mesh plus the matching rest-pose vertex positions."""

    vertices: np.ndarray
    faces: np.ndarray
    rest_vertices: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.rest_vertices is None:
            self.rest_vertices = self.vertices.copy()
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=np.float64).reshape(-1, 3)
        if len(self.rest_vertices) != len(self.vertices):
            raise MeshError(
                f"{len(self.vertices)} vertices but {len(self.rest_vertices)} rest vertices"
            )
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def transformed(self, fn) -> "TemplateMesh":
        return TemplateMesh(fn(self.vertices), self.faces.copy(), self.rest_vertices.copy())


@dataclass
class SurfaceMesh:
    """Mesh in voxel units as produced by isosurface extraction."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.faces)

    def enclosed_volume(self) -> float:
        return enclosed_volume(self.vertices, self.faces)


def boundary_edges(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edges and how many faces share each."""
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        return np.zeros((0, 2), np.int64), np.zeros(0, np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def check_watertight(faces: np.ndarray) -> None:
    """Raise :class:`MeshError` unless every edge is shared by exactly two faces."""
    edges, counts = boundary_edges(faces)
    if len(edges) == 0:
        raise MeshError("mesh has no faces")
    bad = np.nonzero(counts != 2)[0]
    if len(bad):
        i = bad[0]
        raise MeshError(
            f"mesh is not watertight: edge ({edges[i, 0]}, {edges[i, 1]}) is shared by "
            f"{counts[i]} face(s); {len(bad)} offending edge(s) in total"
        )


def is_watertight(faces: np.ndarray) -> bool:
    try:
        check_watertight(faces)
    except MeshError:
        return False
    return True


def face_normals(vertices: np.ndarray, faces: np.ndarray, normalize: bool = True) -> np.ndarray:
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if normalize:
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
    return n


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    n = np.zeros_like(vertices)
    if len(faces):
        fn = face_normals(vertices, faces, normalize=False)
        for k in range(3):
            np.add.at(n, faces[:, k], fn)
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)


def enclosed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    """Signed volume by the divergence theorem (positive for outward faces)."""
    if len(faces) == 0:
        return 0.0
    tri = vertices[faces]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def vertex_neighbors(n_vertices: int, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Directed one-ring adjacency as (source, target) index arrays."""
    edges, _ = boundary_edges(faces)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    return src, dst


# -- primitives ---------------------------------------------------------------

def box(lo, hi) -> TemplateMesh:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    v = lo + corners * (hi - lo)
    f = np.array([
        [0, 1, 3], [0, 3, 2],  # x = lo
        [4, 6, 7], [4, 7, 5],  # x = hi
        [0, 4, 5], [0, 5, 1],  # y = lo
        [2, 3, 7], [2, 7, 6],  # y = hi
        [0, 2, 6], [0, 6, 4],  # z = lo
        [1, 5, 7], [1, 7, 3],  # z = hi
    ])
    return TemplateMesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TemplateMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(v) + inv.reshape(3, -1).T  # midpoints of edges (01, 12, 20)
        v = np.vstack([v, mid])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
    return TemplateMesh(v * radius + np.asarray(center, float), f)


# -- OBJ ----------------------------------------------------------------------

def write_obj(path, vertices, faces, colors=None) -> None:
    """ASCII OBJ; per-vertex colours go in the ``v x y z r g b`` extension."""
    vertices = np.asarray(vertices, float)
    lines = []
    if colors is None:
        lines.extend(f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices)
    else:
        colors = np.asarray(colors, float)
        lines.extend(
            f"v {x:.9g} {y:.9g} {z:.9g} {r:.9g} {g:.9g} {b:.9g}"
            for (x, y, z), (r, g, b) in zip(vertices, colors)
        )
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, int))
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Return (vertices, faces, colors-or-None) from an ASCII OBJ."""
    verts, cols, faces = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vals = [float(p) for p in parts[1:]]
                verts.append(vals[:3])
                if len(vals) >= 6:
                    cols.append(vals[3:6])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise MeshError(f"{path}:{lineno}: malformed OBJ record") from exc
    v = np.asarray(verts, float).reshape(-1, 3)
    f = np.asarray(faces, np.int64).reshape(-1, 3)
    c = np.asarray(cols, float).reshape(-1, 3) if cols and len(cols) == len(verts) else None
    return v, f, c

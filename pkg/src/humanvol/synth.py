"""Procedural articulated bodies and the ground-truth targets rendered from them.

A body is a smooth union of posed capsules meshed with marching cubes.  The
"detailed" surface adds a non-negative sinusoidal outward offset (a stand-in
for clothing wrinkles); the "coarse" surface is the bare capsule union and
plays the role of the fitted template body.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

from .autodiff import Tensor
from .io import load_image_png, read_grid, read_map, save_image_png, write_grid, write_map
from .layers import depth_to_normal
from .meshes import TemplateMesh, enclosed_volume, face_normals, read_obj, write_obj
from .raster import rasterize
from .semantic import (
    DEFAULT_VOLUME_DIMS,
    FitTransform,
    assign_semantic_codes,
    build_semantic_volume,
    render_depth,
    render_semantic_map,
    voxelize,
)

log = logging.getLogger(__name__)

BLEND = 0.03          # smooth-union radius, model units
MESH_PITCH = 0.02     # implicit sampling step for meshing, model units
LIGHT = np.array([0.35, 0.55, -0.75]) / np.linalg.norm([0.35, 0.55, -0.75])  # towards the light
ALBEDO = np.array([0.85, 0.7, 0.55])
MANIFEST_COLUMNS = (
    "id", "seed", "view", "image", "semantic_map", "semantic_vol", "occupancy",
    "sil_front", "sil_side", "normal", "coarse", "detailed",
)


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@dataclass
class Capsule:
    name: str
    a: np.ndarray
    b: np.ndarray
    radius: float
    rotation: np.ndarray      # world rotation of the bone relative to rest
    rest_a: np.ndarray


@dataclass
class BodyParams:
    seed: int
    lengths: dict
    radii: dict
    angles: dict              # radians, offsets from the rest (A-) pose
    wrinkle: tuple            # (freq_x, freq_y, freq_z, phase_1, phase_2)


@dataclass
class Body:
    params: BodyParams
    detailed: TemplateMesh
    coarse: TemplateMesh
    detail_amplitude: float
    skeleton: list = field(default_factory=list, repr=False)


_PAIRS = {  # bones sharing a joint may touch
    frozenset(p) for p in [
        ("torso", "neck"), ("neck", "head"), ("torso", "head"),
        ("torso", "l_upper_arm"), ("torso", "r_upper_arm"),
        ("l_upper_arm", "l_forearm"), ("r_upper_arm", "r_forearm"),
        ("torso", "l_thigh"), ("torso", "r_thigh"),
        ("l_thigh", "l_shin"), ("r_thigh", "r_shin"), ("l_thigh", "r_thigh"),
        ("neck", "l_upper_arm"), ("neck", "r_upper_arm"),
    ]
}


def sample_params(seed: int, rng: np.random.Generator | None = None) -> BodyParams:
    rng = np.random.default_rng(seed) if rng is None else rng
    j = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    lengths = {"torso": j(0.5, 0.6), "neck": 0.12, "upper_arm": j(0.27, 0.33), "forearm": j(0.25, 0.3),
               "thigh": j(0.38, 0.45), "shin": j(0.38, 0.45), "shoulder": j(0.2, 0.24), "hip": j(0.1, 0.12)}
    radii = {"torso": j(0.14, 0.18), "neck": 0.06, "head": j(0.1, 0.12), "upper_arm": j(0.06, 0.075),
             "forearm": j(0.05, 0.06), "thigh": j(0.08, 0.095), "shin": j(0.06, 0.07)}
    d = np.deg2rad
    angles = {}
    for side in ("l", "r"):
        angles[f"{side}_abduct"] = d(j(-25, 35))
        angles[f"{side}_flex"] = d(j(-35, 35))
        angles[f"{side}_elbow"] = d(j(0, 70))
        angles[f"{side}_hip_abduct"] = d(j(-2, 10))
        angles[f"{side}_hip_flex"] = d(j(-25, 25))
        angles[f"{side}_knee"] = d(j(0, 45))
    wrinkle = (j(25, 45), j(30, 55), j(25, 45), j(0, 2 * np.pi), j(0, 2 * np.pi))
    return BodyParams(seed, lengths, radii, angles, wrinkle)


def rest_params(params: BodyParams) -> BodyParams:
    return BodyParams(params.seed, params.lengths, params.radii,
                      {k: 0.0 for k in params.angles}, params.wrinkle)


def build_skeleton(p: BodyParams) -> list[Capsule]:
    """Posed capsules.  Rest pose: upright, arms 45 degrees down, legs straight."""
    L, R = p.lengths, p.radii
    caps = []
    top = np.array([0.0, L["torso"], 0.0])
    eye = np.eye(3)
    caps.append(Capsule("torso", np.zeros(3), top, R["torso"], eye, np.zeros(3)))
    neck_top = top + [0, L["neck"], 0]
    caps.append(Capsule("neck", top, neck_top, R["neck"], eye, top))
    head_c = neck_top + [0, R["head"] * 0.8, 0]
    caps.append(Capsule("head", head_c, head_c + [0, R["head"] * 0.5, 0], R["head"], eye, head_c))
    down = np.array([0.0, -1.0, 0.0])
    for side, sx in (("l", -1.0), ("r", 1.0)):
        a = p.angles
        # arm
        shoulder = top + np.array([sx * L["shoulder"], -0.05, 0.0])
        rest_up = _rot_z(sx * np.pi / 4)
        rot_up = _rot_z(sx * a[f"{side}_abduct"]) @ _rot_x(a[f"{side}_flex"])
        elbow = shoulder + rot_up @ rest_up @ down * L["upper_arm"]
        rest_elbow = shoulder + rest_up @ down * L["upper_arm"]
        caps.append(Capsule(f"{side}_upper_arm", shoulder, elbow, R["upper_arm"], rot_up, shoulder))
        rot_fore = rot_up @ _rot_x(-a[f"{side}_elbow"])
        wrist = elbow + rot_up @ _rot_x(-a[f"{side}_elbow"]) @ rest_up @ down * L["forearm"]
        caps.append(Capsule(f"{side}_forearm", elbow, wrist, R["forearm"], rot_fore, rest_elbow))
        # leg
        hip = np.array([sx * L["hip"], 0.0, 0.0])
        rot_th = _rot_z(sx * a[f"{side}_hip_abduct"]) @ _rot_x(a[f"{side}_hip_flex"])
        knee = hip + rot_th @ down * L["thigh"]
        rest_knee = hip + down * L["thigh"]
        caps.append(Capsule(f"{side}_thigh", hip, knee, R["thigh"], rot_th, hip))
        rot_sh = rot_th @ _rot_x(a[f"{side}_knee"])
        ankle = knee + rot_sh @ down * L["shin"]
        caps.append(Capsule(f"{side}_shin", knee, ankle, R["shin"], rot_sh, rest_knee))
    return caps


def _segment_distance(p1, q1, p2, q2) -> float:
    """Closest distance between two 3-D segments (clamped parametric solve)."""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    c, b = d1 @ r, d1 @ d2
    denom = a * e - b * b
    s = np.clip((b * f - c * e) / denom, 0, 1) if denom > 1e-12 else 0.0
    t = (b * s + f) / e
    if t < 0:
        t, s = 0.0, np.clip(-c / a, 0, 1)
    elif t > 1:
        t, s = 1.0, np.clip((b - c) / a, 0, 1)
    return float(np.linalg.norm(p1 + d1 * s - (p2 + d2 * t)))


def self_intersections(caps: list[Capsule], clearance: float = 0.01) -> list[tuple[str, str]]:
    """Pairs of bones without a shared joint whose capsules overlap."""
    bad = []
    for i in range(len(caps)):
        for j in range(i + 1, len(caps)):
            ci, cj = caps[i], caps[j]
            if frozenset((ci.name, cj.name)) in _PAIRS:
                continue
            if _segment_distance(ci.a, ci.b, cj.a, cj.b) < ci.radius + cj.radius + clearance:
                bad.append((ci.name, cj.name))
    return bad


def _segment_dist_field(pts, a, b):
    ab = b - a
    t = np.clip(((pts - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1), t


def body_field(caps: list[Capsule], pts: np.ndarray) -> np.ndarray:
    """Smooth-union signed distance (negative inside)."""
    d = np.stack([_segment_dist_field(pts, c.a, c.b)[0] - c.radius for c in caps])
    m = d.min(axis=0)
    return m - BLEND * np.log(np.exp(-(d - m) / BLEND).sum(axis=0))


def wrinkle_field(params: BodyParams, pts: np.ndarray) -> np.ndarray:
    """Non-negative pattern in [0, 1]."""
    fx, fy, fz, p1, p2 = params.wrinkle
    return 0.5 * (1.0 + np.sin(fy * pts[:, 1] + p1 + 0.6 * np.sin(fx * pts[:, 0] + fz * pts[:, 2] + p2)))


def _mesh_field(values: np.ndarray, origin: np.ndarray, pitch: float):
    verts, faces, _, _ = measure.marching_cubes(values, level=0.0, spacing=(pitch,) * 3,
                                                method="lewiner", allow_degenerate=False)
    verts = verts.astype(np.float64) + origin
    faces = faces.astype(np.int64)
    if enclosed_volume(verts, faces) < 0:  # field is negative inside
        faces = faces[:, ::-1].copy()
    return verts, faces


def _rest_positions(caps: list[Capsule], verts: np.ndarray) -> np.ndarray:
    """Map each posed vertex into the rest pose through its nearest bone."""
    dist = []
    for c in caps:
        d, _ = _segment_dist_field(verts, c.a, c.b)
        dist.append(d - c.radius)
    owner = np.argmin(np.stack(dist), axis=0)
    rest = np.empty_like(verts)
    for k, c in enumerate(caps):
        sel = owner == k
        rest[sel] = (verts[sel] - c.a) @ c.rotation + c.rest_a
    return rest


def generate_body(seed: int, detail_amplitude: float = 0.05, pitch: float = MESH_PITCH,
                  max_attempts: int = 50) -> Body:
    """Deterministic posed body; re-samples poses whose bones interpenetrate."""
    if detail_amplitude < 0:
        raise ValueError("detail_amplitude must be non-negative")
    rng = np.random.default_rng(seed)
    for attempt in range(max_attempts):
        params = sample_params(seed, rng)
        caps = build_skeleton(params)
        bad = self_intersections(caps)
        if not bad:
            break
        log.info("seed %d attempt %d: self-intersecting pose (%s); re-sampling",
                 seed, attempt, ", ".join(f"{a}/{b}" for a, b in bad))
    else:
        raise RuntimeError(f"seed {seed}: no valid pose after {max_attempts} attempts")

    ends = np.concatenate([np.stack([c.a, c.b]) for c in caps])
    rmax = max(c.radius for c in caps)
    pad = rmax + detail_amplitude + 3 * pitch
    lo = ends.min(0) - pad
    hi = ends.max(0) + pad
    n = np.ceil((hi - lo) / pitch).astype(int) + 1
    axes = [lo[i] + pitch * np.arange(n[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    base = body_field(caps, pts)
    coarse_v, coarse_f = _mesh_field(base.reshape(n), lo, pitch)
    if detail_amplitude == 0:
        det_v, det_f = coarse_v.copy(), coarse_f.copy()
    else:
        det = base - detail_amplitude * wrinkle_field(params, pts)
        det_v, det_f = _mesh_field(det.reshape(n), lo, pitch)
    coarse = TemplateMesh(coarse_v, coarse_f, _rest_positions(caps, coarse_v))
    detailed = TemplateMesh(det_v, det_f, _rest_positions(caps, det_v))
    return Body(params, detailed, coarse, detail_amplitude, caps)


# -- rendering ----------------------------------------------------------------

def view_yaws(seed: int, views: int) -> np.ndarray:
    """Yaw angles (radians) evenly spread from a seeded random start, so every
    view is uniform on the circle and views stay distinct."""
    u = np.random.default_rng([seed, 7919]).uniform()
    return 2 * np.pi * ((u + np.arange(views) / views) % 1.0)


def _quantize(image: np.ndarray) -> np.ndarray:
    """8-bit quantisation matching the PNG round trip."""
    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255)
    return (q / 255.0).astype(np.float32)


def _f32(a) -> np.ndarray:
    return np.asarray(a, np.float32).astype(np.float64)


@dataclass
class CorpusItem:
    """Every array shares the item's camera; meshes are in voxel units."""

    id: int
    seed: int
    view: int
    image: np.ndarray            # (H, W, 3) float32 in [0, 1]
    semantic_map: np.ndarray     # (H, W, 3)
    semantic_volume: np.ndarray  # (X, Y, Z, 3)
    occupancy: np.ndarray        # (X, Y, Z) binary float32
    sil_front: np.ndarray        # (H, W) = (Y, X)
    sil_side: np.ndarray         # (Y, Z)
    normal: np.ndarray           # (2H, 2W, 3)
    coarse_vertices: np.ndarray = field(repr=False, default=None)
    coarse_faces: np.ndarray = field(repr=False, default=None)
    coarse_codes: np.ndarray = field(repr=False, default=None)
    detailed_vertices: np.ndarray = field(repr=False, default=None)
    detailed_faces: np.ndarray = field(repr=False, default=None)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.occupancy.shape)

    def coarse_occupancy(self) -> np.ndarray:
        return (np.abs(self.semantic_volume).sum(-1) > 0).astype(np.float32)


def ground_truth_normals(mesh: TemplateMesh, image_dims, fit: FitTransform) -> np.ndarray:
    """``(2H, 2W, 3)`` normals from the 2x front depth; zero near background."""
    H, W = image_dims
    r = render_depth(mesh, (2 * H, 2 * W), fit, upscale=2)
    bg = 4.0 * (np.abs(r.depth[r.mask]).max() + 1.0) if r.mask.any() else 1.0
    depth = np.where(r.mask, r.depth, bg)
    n = depth_to_normal(Tensor(depth), background_level=bg).data
    return np.transpose(n, (1, 2, 0))


def shade(mesh: TemplateMesh, image_dims, fit: FitTransform) -> np.ndarray:
    """Flat-shaded front render under a fixed directional light."""
    H, W = image_dims
    verts = fit.apply(mesh.vertices)
    r = rasterize(verts[mesh.faces], W, H)
    img = np.zeros((H, W, 3))
    if r.mask.any():
        fn = face_normals(verts, mesh.faces)[r.face[r.mask]]
        lambert = np.clip(fn @ LIGHT, 0.0, 1.0)
        img[r.mask] = ALBEDO * (0.25 + 0.75 * lambert)[:, None]
    return img


def render_item(body: Body, view_index: int, yaw: float, dims=DEFAULT_VOLUME_DIMS, item_id: int = 0) -> CorpusItem:
    X, Y, Z = dims
    image_dims = (Y, X)
    rot = _rot_y(yaw)
    detailed = body.detailed.transformed(lambda v: v @ rot.T)
    coarse = body.coarse.transformed(lambda v: v @ rot.T)
    fit = FitTransform.fit(detailed.vertices, dims)

    codes = assign_semantic_codes(coarse)
    occ = voxelize(detailed, dims, fit)
    vs = build_semantic_volume(coarse, codes, dims, fit)
    ms = render_semantic_map(coarse, codes, image_dims, fit)
    occ32 = occ.astype(np.float32)
    return CorpusItem(
        id=item_id,
        seed=body.params.seed,
        view=view_index,
        image=_quantize(shade(detailed, image_dims, fit)),
        semantic_map=ms.astype(np.float32),
        semantic_volume=vs.astype(np.float32),
        occupancy=occ32,
        sil_front=occ32.max(axis=2).T.copy(),
        sil_side=occ32.max(axis=0).copy(),
        normal=ground_truth_normals(detailed, image_dims, fit).astype(np.float32),
        coarse_vertices=_f32(fit.apply(coarse.vertices)),
        coarse_faces=coarse.faces.copy(),
        coarse_codes=_f32(codes),
        detailed_vertices=_f32(fit.apply(detailed.vertices)),
        detailed_faces=detailed.faces.copy(),
    )


# -- corpus on disk -------------------------------------------------------------

def body_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1, np.uint32)[0])


def _item_files(item_id: int) -> dict:
    d = f"item_{item_id:05d}"
    return {
        "image": f"{d}/image.png",
        "semantic_map": f"{d}/semantic_map.dhvg",
        "semantic_vol": f"{d}/semantic_vol.dhvg",
        "occupancy": f"{d}/occupancy.dhvg",
        "sil_front": f"{d}/sil_front.dhvg",
        "sil_side": f"{d}/sil_side.dhvg",
        "normal": f"{d}/normal.dhvg",
        "coarse": f"{d}/coarse.obj",
        "detailed": f"{d}/detailed.obj",
    }


def save_item(root, item: CorpusItem) -> dict:
    root = Path(root)
    files = _item_files(item.id)
    (root / files["image"]).parent.mkdir(parents=True, exist_ok=True)
    save_image_png(root / files["image"], item.image)
    write_map(root / files["semantic_map"], item.semantic_map)
    write_grid(root / files["semantic_vol"], item.semantic_volume)
    write_grid(root / files["occupancy"], item.occupancy[..., None])
    write_map(root / files["sil_front"], item.sil_front[..., None])
    write_map(root / files["sil_side"], item.sil_side[..., None])
    write_map(root / files["normal"], item.normal)
    write_obj(root / files["coarse"], item.coarse_vertices, item.coarse_faces, item.coarse_codes)
    write_obj(root / files["detailed"], item.detailed_vertices, item.detailed_faces)
    return files


def load_item(root, row: dict) -> CorpusItem:
    root = Path(root)
    cv, cf, cc = read_obj(root / row["coarse"])
    dv, df, _ = read_obj(root / row["detailed"])
    return CorpusItem(
        id=int(row["id"]),
        seed=int(row["seed"]),
        view=int(row["view"]),
        image=load_image_png(root / row["image"]).astype(np.float32),
        semantic_map=read_map(root / row["semantic_map"]),
        semantic_volume=read_grid(root / row["semantic_vol"]),
        occupancy=read_grid(root / row["occupancy"])[..., 0],
        sil_front=read_map(root / row["sil_front"])[..., 0],
        sil_side=read_map(root / row["sil_side"])[..., 0],
        normal=read_map(root / row["normal"]),
        coarse_vertices=_f32(cv), coarse_faces=cf, coarse_codes=None if cc is None else _f32(cc),
        detailed_vertices=_f32(dv), detailed_faces=df,
    )


def build_corpus(out_dir, n_bodies: int, views_per_body: int = 4, dims=DEFAULT_VOLUME_DIMS,
                 seed: int = 0, detail_amplitude: float = 0.05) -> Path:
    """Write ``n_bodies * views_per_body`` items plus ``manifest.csv``."""
    if n_bodies < 1 or views_per_body < 1:
        raise ValueError("n_bodies and views_per_body must be at least 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"corpus directory {out} is not writable: {exc}") from exc
    rows = []
    for b in range(n_bodies):
        s = body_seed(seed, b)
        body = generate_body(s, detail_amplitude)
        for v, yaw in enumerate(view_yaws(s, views_per_body)):
            item = render_item(body, v, yaw, dims, item_id=b * views_per_body + v)
            files = save_item(out, item)
            rows.append({"id": item.id, "seed": s, "view": v, **files})
            log.info("wrote item %d (body %d, view %d)", item.id, b, v)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return out


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.csv in {root}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(MANIFEST_COLUMNS) - set(rows[0] if rows else MANIFEST_COLUMNS)
    if missing:
        raise ValueError(f"manifest missing columns: {sorted(missing)}")
    return rows


def load_corpus(root) -> list[CorpusItem]:
    return [load_item(root, row) for row in read_manifest(root)]

"""Inference, mesh extraction and the evaluation report."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .io import read_grid, read_map, save_normal_png, write_grid, write_map
from .layers import upsample2x
from .losses import loss_silhouette
from .mesh_pipeline import iou_zshift, marching_cubes, refine_with_normals
from .meshes import SurfaceMesh, write_obj
from .network import Network, forward, to_batch

REPORT_COLUMNS = (
    "id", "iou", "best_shift", "baseline_iou", "sil_loss",
    "cos_refined", "cos_unrefined", "l2_refined", "l2_unrefined",
)

_TINY = np.nextafter(np.float32(0), np.float32(1))
_BELOW_ONE = np.nextafter(np.float32(1), np.float32(0))


@dataclass
class Prediction:
    occupancy: np.ndarray      # binary (X, Y, Z) float32
    soft: np.ndarray           # sigmoid occupancy (X, Y, Z)
    normal: np.ndarray         # refined (2H, 2W, 3)
    normal_raw: np.ndarray     # projected, upsampled 2x (2H, 2W, 3)
    sil_loss: float            # L_FS + L_SS against the item's silhouettes


def threshold_occupancy(soft: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Occupied iff ``p >= threshold``, with ``p`` held inside the open unit interval
    so threshold 0 fills the grid and threshold 1 empties it."""
    p = np.clip(np.asarray(soft, np.float32), _TINY, _BELOW_ONE)
    return (p >= threshold).astype(np.float32)


def infer(net: Network, items, threshold: float = 0.5, batch: int = 4) -> list[Prediction]:
    preds = []
    with no_grad():
        for start in range(0, len(items), batch):
            chunk = items[start:start + batch]
            b = to_batch(chunk)
            out = forward(net, b["image"], b["semantic_map"], b["semantic_volume"])
            raw_up = upsample2x(out.N_raw).data
            for k in range(len(chunk)):
                sil = loss_silhouette(Tensor(out.S_fv.data[k]), b["sil_front"][k]).item() + \
                    loss_silhouette(Tensor(out.S_sv.data[k]), b["sil_side"][k]).item()
                soft = out.V_o.data[k, 0]
                preds.append(Prediction(
                    occupancy=threshold_occupancy(soft, threshold),
                    soft=soft,
                    normal=np.transpose(out.N.data[k], (1, 2, 0)),
                    normal_raw=np.transpose(raw_up[k], (1, 2, 0)),
                    sil_loss=float(sil),
                ))
    return preds


def extract_mesh(occupancy: np.ndarray, normal_map: np.ndarray | None = None, refine: bool = True,
                 lambda_pos: float = 0.1) -> SurfaceMesh:
    mesh = marching_cubes(occupancy, 0.5)
    if refine and normal_map is not None:
        mesh = refine_with_normals(mesh, normal_map, lambda_pos=lambda_pos)
    return mesh


def normal_errors(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, float]:
    """Mean cosine distance and mean l2 distance of unit normals over valid pixels.

    Valid pixels have nonzero target and prediction (and ``mask`` when given).
    """
    p = np.asarray(pred, float)
    t = np.asarray(target, float)
    pn = np.linalg.norm(p, axis=-1)
    tn = np.linalg.norm(t, axis=-1)
    valid = (pn > 0) & (tn > 0)
    if mask is not None:
        valid &= mask
    if not valid.any():
        return float("nan"), float("nan")
    pu = p[valid] / pn[valid, None]
    tu = t[valid] / tn[valid, None]
    cos = 1.0 - np.sum(pu * tu, axis=-1)
    return float(cos.mean()), float(np.linalg.norm(pu - tu, axis=-1).mean())


def evaluate_item(item, pred: Prediction | None = None, occupancy=None, normal=None, normal_raw=None) -> dict:
    """Per-item metrics; either a :class:`Prediction` or raw arrays.

    The row also carries the IoU-versus-shift ``curve`` as ``(shifts, iou)``.
    """
    if pred is not None:
        occupancy, normal, normal_raw = pred.occupancy, pred.normal, pred.normal_raw
    rep = iou_zshift(occupancy, item.occupancy)
    base = iou_zshift(item.coarse_occupancy(), item.occupancy)
    row = {"id": item.id, "iou": rep.iou, "best_shift": rep.best_shift, "baseline_iou": base.iou,
           "sil_loss": pred.sil_loss if pred is not None else float("nan"),
           "curve": (rep.shifts, rep.curve)}
    common = None
    if normal_raw is not None:
        common = (np.linalg.norm(normal, axis=-1) > 0) & (np.linalg.norm(normal_raw, axis=-1) > 0)
        row["cos_unrefined"], row["l2_unrefined"] = normal_errors(normal_raw, item.normal, common)
    else:
        row["cos_unrefined"] = row["l2_unrefined"] = float("nan")
    row["cos_refined"], row["l2_refined"] = normal_errors(normal, item.normal, common)
    return row


def summarize(rows: list[dict]) -> dict:
    mean = {"id": "mean"}
    for c in REPORT_COLUMNS[1:]:
        vals = np.array([r[c] for r in rows], float)
        vals = vals[np.isfinite(vals)]
        mean[c] = float(vals.mean()) if len(vals) else float("nan")
    return mean


def write_report(path, rows: list[dict]) -> dict:
    """Per-item rows followed by a ``mean`` row."""
    mean = summarize(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows + [mean]:
            w.writerow([r["id"]] + [repr(float(r[c])) if c != "best_shift" or r is mean else int(r[c])
                                    for c in REPORT_COLUMNS[1:]])
    return mean


def write_iou_curves(path, rows: list[dict]) -> None:
    """Long-format ``id, shift, iou`` table of every row's z-shift curve."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "shift", "iou"))
        for r in rows:
            for s, v in zip(*r["curve"]):
                w.writerow((r["id"], int(s), repr(float(v))))


def load_prediction_dir(path: Path):
    """Arrays written by ``infer`` for one item (or a corpus item directory)."""
    occ = read_grid(path / "occupancy.dhvg")[..., 0]
    normal = read_map(path / "normal.dhvg")
    raw = path / "normal_raw.dhvg"
    return occ, normal, (read_map(raw) if raw.exists() else None)


def save_prediction(out_dir: Path, pred: Prediction, mesh: SurfaceMesh | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_grid(out_dir / "occupancy.dhvg", pred.occupancy[..., None])
    write_map(out_dir / "normal.dhvg", pred.normal.astype(np.float32))
    write_map(out_dir / "normal_raw.dhvg", pred.normal_raw.astype(np.float32))
    save_normal_png(out_dir / "normal.png", np.clip(pred.normal, -1, 1))
    if mesh is not None:
        write_obj(out_dir / "mesh.obj", mesh.vertices, mesh.faces)

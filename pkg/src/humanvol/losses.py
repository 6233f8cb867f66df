"""Training losses: weighted occupancy BCE, silhouette BCE, normal cosine distance."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, clip, log, sqrt, where

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_fs: float = 0.1
    lambda_ss: float = 0.1
    lambda_n: float = 0.01
    gamma: float = 0.7

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")


class NonFiniteLoss(FloatingPointError):
    pass


def _check_shapes(pred: Tensor, target: np.ndarray, what: str):
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise ShapeError(f"{what}: prediction {pred.shape} vs target {np.shape(target)}")


def loss_volume(pred, target, gamma: float = 0.7, eps: float = EPS) -> Tensor:
    """Class-weighted BCE averaged over all voxels; ``gamma`` weights occupied ones."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    _check_shapes(pred, target, "loss_volume")
    p = clip(pred, eps, 1.0 - eps)
    terms = log(p) * (gamma * target) + log(1.0 - p) * ((1.0 - gamma) * (1.0 - target))
    return terms.mean() * -1.0


def loss_silhouette(pred, target, eps: float = EPS) -> Tensor:
    """Plain BCE averaged over pixels."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    _check_shapes(pred, target, "loss_silhouette")
    p = clip(pred, eps, 1.0 - eps)
    terms = log(p) * target + log(1.0 - p) * (1.0 - target)
    return terms.mean() * -1.0


def loss_normal(pred, target, channel_axis: int = -3) -> Tensor:
    """Mean cosine distance over pixels where both normals are nonzero."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    _check_shapes(pred, target, "loss_normal")
    dot = (pred * target).sum(axis=channel_axis)
    pn2 = (pred * pred).sum(axis=channel_axis)
    tn = np.sqrt((target * target).sum(axis=channel_axis))
    valid = (pn2.data > 0) & (tn > 0)
    count = int(valid.sum())
    if count == 0:
        warnings.warn("loss_normal: no pixel has both normals nonzero; returning 0", RuntimeWarning)
        return (pred * 0.0).sum()
    pn = sqrt(where(valid, pn2, 1.0))
    cos = dot / (pn * np.where(valid, tn, 1.0))
    return where(valid, 1.0 - cos, 0.0).sum() * (1.0 / count)


def loss_combined(l_v, l_fs, l_ss, l_n, weights: LossWeights = LossWeights()) -> Tensor:
    parts = {"L_V": l_v, "L_FS": l_fs, "L_SS": l_ss, "L_N": l_n}
    for name, val in parts.items():
        v = float(as_tensor(val).data) if not isinstance(val, (int, float)) else float(val)
        if not math.isfinite(v):
            raise NonFiniteLoss(f"loss component {name} is not finite ({v})")
    total = as_tensor(l_v) + as_tensor(l_fs) * weights.lambda_fs
    total = total + as_tensor(l_ss) * weights.lambda_ss
    return total + as_tensor(l_n) * weights.lambda_n

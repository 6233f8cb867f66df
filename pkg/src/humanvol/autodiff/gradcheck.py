"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to the entries of ``x``."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn().data)
        flat[i] = orig - step
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error, guarded against all-zero gradients."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4
) -> list[float]:
    """Return the relative error for each input of scalar ``fn``."""
    for t in inputs:
        t.zero_grad()
    fn().backward()
    errors = []
    for t in inputs:
        analytic = t.grad.copy()
        numeric = numerical_gradient(fn, t, step)
        errors.append(relative_error(analytic, numeric))
    return errors

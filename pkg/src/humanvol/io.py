"""DHVG raw grids and PNG export.

DHVG layout (little-endian): ``b"DHVG" | version u32 | X Y Z u32 | channels u32 |
float32 values`` ordered z-major, then y, then x, channels innermost.  A 2-D
map of shape ``(H, W, C)`` is stored as a grid with ``X=W, Y=H, Z=1`` which
makes its value order exactly row-major ``(H, W, C)``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"DHVG"
VERSION = 1


class GridFormatError(ValueError):
    pass


def write_grid(path, volume: np.ndarray) -> None:
    """Write an ``(X, Y, Z)`` or ``(X, Y, Z, C)`` volume."""
    v = np.asarray(volume)
    if v.ndim == 3:
        v = v[..., None]
    if v.ndim != 4:
        raise GridFormatError(f"expected a rank-3 or rank-4 volume, got shape {v.shape}")
    X, Y, Z, C = v.shape
    body = np.ascontiguousarray(np.transpose(v, (2, 1, 0, 3)), dtype="<f4").tobytes()
    Path(path).write_bytes(MAGIC + struct.pack("<IIIII", VERSION, X, Y, Z, C) + body)


def read_grid(path) -> np.ndarray:
    """Read a DHVG file as ``(X, Y, Z, C)`` float32."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise GridFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 24:
        raise GridFormatError(f"{path}: truncated header")
    version, X, Y, Z, C = struct.unpack_from("<IIIII", buf, 4)
    if version != VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    n = X * Y * Z * C
    if len(buf) != 24 + 4 * n:
        raise GridFormatError(f"{path}: expected {24 + 4 * n} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=24).reshape(Z, Y, X, C)
    return np.transpose(data, (2, 1, 0, 3)).astype(np.float32)


def write_map(path, image: np.ndarray) -> None:
    """Write an ``(H, W)`` or ``(H, W, C)`` map."""
    m = np.asarray(image)
    if m.ndim == 2:
        m = m[..., None]
    write_grid(path, np.transpose(m, (1, 0, 2))[:, :, None, :])


def read_map(path) -> np.ndarray:
    """Read a map written by :func:`write_map` as ``(H, W, C)``."""
    g = read_grid(path)
    if g.shape[2] != 1:
        raise GridFormatError(f"{path}: Z extent {g.shape[2]} is not a 2-D map")
    return np.transpose(g[:, :, 0, :], (1, 0, 2))


def _to_png(path, rgb: np.ndarray) -> None:
    # rows run along +y; flip so the body's +y (head) is up on screen
    Image.fromarray(np.ascontiguousarray(rgb[::-1])).save(path, optimize=False)


def save_image_png(path, image: np.ndarray) -> None:
    """Save an ``(H, W, 3)`` image with values in [0, 1]."""
    rgb = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _to_png(path, rgb)


def load_image_png(path) -> np.ndarray:
    rgb = np.asarray(Image.open(path).convert("RGB"))[::-1]
    return rgb.astype(np.float64) / 255.0


def save_normal_png(path, normals: np.ndarray) -> None:
    """Normals mapped through (n + 1) / 2 to 8-bit RGB."""
    save_image_png(path, (np.asarray(normals) + 1.0) / 2.0)


def save_depth_png(path, depth: np.ndarray, background: float) -> None:
    d = np.asarray(depth, float)
    fg = d < background
    out = np.zeros(d.shape)
    if fg.any():
        lo, hi = d[fg].min(), d[fg].max()
        out[fg] = 1.0 - (d[fg] - lo) / max(hi - lo, 1e-9) * 0.8
    save_image_png(path, np.repeat(out[..., None], 3, axis=2))

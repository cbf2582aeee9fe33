"""Portable-pixmap (PPM) renders of label grids."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .phantom import LabelGrid, PhantomError, ShapeSequence

# background, LV, LVM, RV, LA, RA, unknown
PALETTE = np.array([
    [0, 0, 0],
    [220, 50, 47],
    [133, 153, 0],
    [38, 139, 210],
    [203, 75, 22],
    [108, 113, 196],
    [128, 128, 128],
], dtype=np.uint8)

AXES = {"x": 0, "y": 1, "z": 2}


def plane_image(grid: LabelGrid, axis: str = "z", index: int | None = None) -> np.ndarray:
    """RGB image (rows, cols, 3) of one axis-aligned plane."""
    if axis not in AXES:
        raise PhantomError(f"unknown axis {axis!r}")
    ax = AXES[axis]
    n = grid.dims[ax]
    index = n // 2 if index is None else index
    if not 0 <= index < n:
        raise PhantomError(f"plane {axis}={index} outside grid {grid.dims}")
    plane = np.take(grid.labels, index, axis=ax)
    # first remaining axis runs along columns
    return PALETTE[plane.T[::-1]]


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: unsupported PPM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)


def render(obj, out_dir, axis: str = "z", index: int | None = None, prefix: str = "frame") -> list[Path]:
    """Write one PPM per grid (or per frame of a sequence)."""
    frames = obj.frames if isinstance(obj, ShapeSequence) else [obj]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, grid in enumerate(frames, start=1):
        img = plane_image(grid, axis, index)
        path = out_dir / f"{prefix}{i:03d}_{axis}.ppm"
        path.write_bytes(ppm_bytes(img))
        paths.append(path)
    return paths

"""Slice overlays of a heatmap on its volume: binary PGM/PPM, optional PNG."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..volume import Volume, values

VIEW_NAMES = {0: "sagittal", 1: "coronal", 2: "axial"}
BLEND_ALPHA = 0.6


def view_slice(data: np.ndarray, axis: int, index: int) -> np.ndarray:
    """2D slice of a (W, H, D) array; shapes are (D, H), (W, D) and (W, H)
    for axis 0, 1 and 2 (rows, columns)."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    n = data.shape[axis]
    if not 0 <= index < n:
        raise IndexError(f"slice {index} out of bounds for axis {axis} of size {n}")
    if axis == 0:
        return data[index, :, :].T
    if axis == 1:
        return data[:, index, :]
    return data[:, :, index]


def _to_gray(data: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(data.shape)
    return np.clip((data - lo) / (hi - lo), 0.0, 1.0) * 255.0


def blend(gray: np.ndarray, heat: np.ndarray, alpha: float = BLEND_ALPHA) -> np.ndarray:
    """RGB uint8 image: gray where heat is 0, tinted red to yellow as heat grows."""
    h = np.clip(heat, 0.0, 1.0)[..., None]
    color = np.stack([np.full(heat.shape, 255.0), 255.0 * np.clip(heat, 0, 1), np.zeros(heat.shape)], axis=-1)
    rgb = (1 - alpha * h) * gray[..., None] + alpha * h * color
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_pgm(image: np.ndarray, path) -> None:
    img = np.asarray(image, dtype=np.uint8)
    rows, cols = img.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + img.tobytes())


def write_ppm(image: np.ndarray, path) -> None:
    img = np.asarray(image, dtype=np.uint8)
    rows, cols, _ = img.shape
    Path(path).write_bytes(f"P6\n{cols} {rows}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, cols, rows, _maxval, data = parts[0], int(parts[1]), int(parts[2]), parts[3], parts[4]
    channels = 3 if magic == b"P6" else 1
    img = np.frombuffer(data, dtype=np.uint8, count=rows * cols * channels)
    return img.reshape(rows, cols, channels) if channels == 3 else img.reshape(rows, cols)


def overlay_slices(volume: Volume, heatmap, axis: int, indices=None, out_dir=".", prefix: str = "overlay",
                   png: bool = False) -> list[Path]:
    """Write ``<prefix>_<view><index>_base.pgm`` and ``..._heat.ppm`` per slice.

    Gray levels use the whole volume's [min, max], so slices are comparable.
    """
    heat = values(heatmap)
    if heat.shape != volume.dims:
        raise ValueError(f"heatmap dims {heat.shape} != volume dims {volume.dims}")
    if indices is None:
        indices = [volume.dims[axis] // 2]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = float(volume.data.min()), float(volume.data.max())
    paths = []
    for idx in indices:
        gray = _to_gray(view_slice(volume.data, axis, int(idx)), lo, hi)
        rgb = blend(gray, view_slice(heat, axis, int(idx)))
        stem = out_dir / f"{prefix}_{VIEW_NAMES[axis]}{int(idx):03d}"
        base_path, heat_path = Path(f"{stem}_base.pgm"), Path(f"{stem}_heat.ppm")
        write_pgm(np.rint(gray).astype(np.uint8), base_path)
        write_ppm(rgb, heat_path)
        paths += [base_path, heat_path]
        if png:
            from PIL import Image

            png_path = Path(f"{stem}_heat.png")
            Image.fromarray(rgb, mode="RGB").save(png_path)
            paths.append(png_path)
    return paths

"""Jacobian maps of displacement fields (tensor-based morphometry)."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .registration.transforms import DisplacementField
from .volume import LabelVolume, Volume, write_labels, write_nifti

LOG_EPS = 1e-6
NO_CHANGE_TOL = 1e-3


class VolumeChange(IntEnum):
    COMPRESSION = 0
    NO_CHANGE = 1
    EXPANSION = 2


CLASS_NAMES = {0: "compression", 1: "nochange", 2: "expansion"}


def _gradients(v: np.ndarray) -> np.ndarray:
    """``J[i, j] = d v_i / d x_j`` in voxel units, shape (3, 3, W, H, D).

    Central differences inside, one-sided first-order differences on faces.
    """
    J = np.zeros((3, 3) + v.shape[1:])
    for i in range(3):
        for j in range(3):
            if v.shape[1 + j] > 1:
                J[i, j] = np.gradient(v[i], axis=j)
    return J


def _physical(J: np.ndarray, spacing) -> np.ndarray:
    s = np.asarray(spacing, dtype=np.float64)
    return J * (s[:, None] / s[None, :]).reshape(3, 3, *([1] * (J.ndim - 2)))


def jacobian_matrix(field: DisplacementField, p, physical: bool = False) -> np.ndarray:
    """3x3 matrix of d v_i / d x_j at voxel ``p`` (voxel units unless ``physical``)."""
    p = tuple(int(i) for i in p)
    if any(i < 0 or i >= n for i, n in zip(p, field.dims)):
        raise IndexError(f"voxel {p} outside field of dims {field.dims}")
    # differentiate only a 3-voxel neighbourhood around p
    lo = [max(0, i - 1) for i in p]
    hi = [min(n, i + 2) for i, n in zip(p, field.dims)]
    patch = field.vectors[:, lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    J = _gradients(patch)[(slice(None), slice(None)) + tuple(i - l for i, l in zip(p, lo))]
    return _physical(J, field.spacing) if physical else J


def det3(J: np.ndarray) -> np.ndarray:
    """Determinant over the leading 3x3 axes (rule of Sarrus)."""
    return (
        J[0, 0] * J[1, 1] * J[2, 2]
        + J[0, 1] * J[1, 2] * J[2, 0]
        + J[0, 2] * J[1, 0] * J[2, 1]
        - J[0, 2] * J[1, 1] * J[2, 0]
        - J[0, 1] * J[1, 0] * J[2, 2]
        - J[0, 0] * J[1, 2] * J[2, 1]
    )


@dataclass(frozen=True)
class JacobianMap:
    det: Volume
    logdet: Volume
    classes: LabelVolume
    tolerance: float = NO_CHANGE_TOL

    def class_histogram(self) -> dict[str, int]:
        counts = np.bincount(self.classes.labels.ravel(), minlength=3)
        return {CLASS_NAMES[k]: int(counts[k]) for k in range(3)}

    def save(self, prefix) -> list[Path]:
        paths = [Path(f"{prefix}_det.nii"), Path(f"{prefix}_logdet.nii"), Path(f"{prefix}_class.nii")]
        write_nifti(self.det, paths[0])
        write_nifti(self.logdet, paths[1])
        write_labels(self.classes, paths[2])
        return paths


def classify(det: np.ndarray, tolerance: float = NO_CHANGE_TOL) -> np.ndarray:
    out = np.full(det.shape, int(VolumeChange.NO_CHANGE), dtype=np.int64)
    out[det > 1 + tolerance] = VolumeChange.EXPANSION
    out[det < 1 - tolerance] = VolumeChange.COMPRESSION
    return out


def jacobian_map(field: DisplacementField, tolerance: float = NO_CHANGE_TOL) -> JacobianMap:
    """det(I + grad v) at every voxel, its clamped log, and the
    expansion / no-change / compression classification."""
    J = _gradients(field.vectors)
    for i in range(3):
        J[i, i] += 1.0
    det = det3(J)
    logdet = np.log(np.maximum(det, LOG_EPS))
    # label 0 doubles as the LabelVolume background, so only 1 and 2 need names
    names = {k: v for k, v in CLASS_NAMES.items() if k}
    classes = LabelVolume(classify(det, tolerance), names, field.spacing, field.affine)
    return JacobianMap(
        Volume(det, field.spacing, field.affine),
        Volume(logdet, field.spacing, field.affine),
        classes,
        tolerance,
    )


def standardize(data: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Zero mean / unit variance over ``mask``; voxels outside the mask are 0."""
    data = np.asarray(data, dtype=np.float64)
    m = np.ones(data.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        return np.zeros_like(data)
    vals = data[m]
    mu = vals.mean()
    sd = vals.std()
    out = (data - mu) / sd if sd > 0 else data - mu
    return np.where(m, out, 0.0)


def cohort_standardize(maps, mask: np.ndarray | None = None) -> list[np.ndarray]:
    """Standardise a list of maps with mean and variance pooled over all of
    them inside ``mask``, so level differences between subjects survive."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        return []
    m = np.ones(maps[0].shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    vals = np.concatenate([x[m] for x in maps])
    if vals.size == 0:
        return [np.zeros_like(x) for x in maps]
    mu, sd = vals.mean(), vals.std()
    return [np.where(m, (x - mu) / sd if sd > 0 else x - mu, 0.0) for x in maps]


def to_model_input(jmap: JacobianMap, mode: str = "det", mask: np.ndarray | None = None,
                   standardized: bool = True) -> Volume:
    """Determinant or log-determinant map, standardised over the brain mask."""
    if mode not in ("det", "logdet"):
        raise ValueError(f"mode must be 'det' or 'logdet', got {mode!r}")
    src = jmap.det if mode == "det" else jmap.logdet
    data = standardize(src.data, mask) if standardized else src.data
    return src.with_data(data)

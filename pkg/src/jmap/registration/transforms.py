"""Affine transforms, displacement fields and backward warping."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..volume import Volume, grid_coords, read_nifti, trilinear, write_nifti
from .bspline import BSplineTransform


@dataclass
class AffineTransform:
    """``phi(p) = matrix @ p + translation`` in world (mm) coordinates."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    status: str = field(default="converged", compare=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(self.matrix)) <= 1e-12:
            raise ValueError("affine matrix is singular")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    def voxel_map(self, fixed_affine, moving_affine=None):
        """(M, t) such that moving_voxel = M @ fixed_voxel + t."""
        fa = np.asarray(fixed_affine, dtype=np.float64)
        ma = fa if moving_affine is None else np.asarray(moving_affine, dtype=np.float64)
        minv = np.linalg.inv(ma[:3, :3])
        M = minv @ self.matrix @ fa[:3, :3]
        t = minv @ (self.matrix @ fa[:3, 3] + self.translation - ma[:3, 3])
        return M, t

    @classmethod
    def from_voxel_map(cls, M, t, fixed_affine, moving_affine=None) -> "AffineTransform":
        fa = np.asarray(fixed_affine, dtype=np.float64)
        ma = fa if moving_affine is None else np.asarray(moving_affine, dtype=np.float64)
        A = ma[:3, :3] @ np.asarray(M) @ np.linalg.inv(fa[:3, :3])
        trans = ma[:3, :3] @ np.asarray(t) + ma[:3, 3] - A @ fa[:3, 3]
        return cls(A, trans)

    def save(self, path) -> None:
        lines = ["type = affine"]
        lines.append("matrix = " + " ".join(repr(float(v)) for v in self.matrix.ravel()))
        lines.append("translation = " + " ".join(repr(float(v)) for v in self.translation))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "AffineTransform":
        kv = _read_kv(path)
        return cls(np.array(kv["matrix"].split(), dtype=np.float64), np.array(kv["translation"].split(), dtype=np.float64))


def _read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def save_bspline(t: BSplineTransform, path) -> None:
    lines = [
        "type = bspline",
        "domain = " + " ".join(str(n) for n in t.domain),
        "control_spacing = " + " ".join(repr(s) for s in t.control_spacing),
        "control_dims = " + " ".join(str(n) for n in t.control_dims),
        "coefficients = " + " ".join(repr(float(v)) for v in t.coefficients.ravel()),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_bspline(path) -> BSplineTransform:
    kv = _read_kv(path)
    domain = tuple(int(v) for v in kv["domain"].split())
    spacing = tuple(float(v) for v in kv["control_spacing"].split())
    t = BSplineTransform(domain, spacing)
    t.coefficients = np.array(kv["coefficients"].split(), dtype=np.float64).reshape(t.coefficients.shape)
    return t


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel ``v(x) = phi(x) - x`` in voxel units on the fixed grid.

    ``vectors`` has shape ``(3, W, H, D)``.
    """

    vectors: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 4 or v.shape[0] != 3:
            raise ValueError(f"vectors must have shape (3, W, H, D), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("displacement field contains non-finite values")
        geom = Volume(np.zeros((1, 1, 1)), self.spacing, self.affine)
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "spacing", geom.spacing)
        object.__setattr__(self, "affine", geom.affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.vectors.shape[1:])  # type: ignore[return-value]

    @classmethod
    def zeros(cls, like: Volume) -> "DisplacementField":
        return cls(np.zeros((3, *like.dims)), like.spacing, like.affine)

    @classmethod
    def from_function(cls, like: Volume, fn) -> "DisplacementField":
        """Field from ``fn(coords) -> phi(coords)`` over voxel coordinates."""
        x = grid_coords(like.dims)
        return cls(np.asarray(fn(x)) - x, like.spacing, like.affine)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.vectors**2, axis=0))

    def sample(self, coords: np.ndarray) -> np.ndarray:
        """Field at continuous coordinates, edge-replicated outside the grid."""
        c = np.asarray(coords, dtype=np.float64)
        c = np.stack([np.clip(c[a], 0, n - 1) for a, n in enumerate(self.dims)])
        return np.stack([trilinear(self.vectors[d], c) for d in range(3)])

    def save(self, prefix) -> list[Path]:
        paths = []
        for d, suffix in enumerate(("_vx", "_vy", "_vz")):
            p = Path(f"{prefix}{suffix}.nii")
            write_nifti(Volume(self.vectors[d], self.spacing, self.affine), p)
            paths.append(p)
        return paths

    @classmethod
    def load(cls, prefix) -> "DisplacementField":
        vols = [read_nifti(f"{prefix}{s}.nii") for s in ("_vx", "_vy", "_vz")]
        return cls(np.stack([v.data for v in vols]), vols[0].spacing, vols[0].affine)


def affine_field(transform: AffineTransform, fixed: Volume, moving: Volume | None = None) -> DisplacementField:
    M, t = transform.voxel_map(fixed.affine, None if moving is None else moving.affine)
    x = grid_coords(fixed.dims)
    phi = np.tensordot(M, x, axes=(1, 0)) + t[:, None, None, None]
    return DisplacementField(phi - x, fixed.spacing, fixed.affine)


def bspline_field(transform: BSplineTransform, fixed: Volume, init: AffineTransform | None = None,
                  moving: Volume | None = None) -> DisplacementField:
    """Composite ``phi(x) = A(x) + u(x)``: affine voxel map plus B-spline offset."""
    base = affine_field(init or AffineTransform(), fixed, moving)
    return DisplacementField(base.vectors + transform.displacement(), fixed.spacing, fixed.affine)


def warp(moving: Volume, transform, fixed: Volume | None = None) -> Volume:
    """Backward warp: ``out(x) = moving(phi(x))`` with trilinear sampling.

    ``transform`` is a DisplacementField, AffineTransform or BSplineTransform;
    the output lives on ``fixed``'s grid (default: the moving grid).
    """
    ref = fixed if fixed is not None else moving
    if isinstance(transform, DisplacementField):
        field_ = transform
    elif isinstance(transform, AffineTransform):
        field_ = affine_field(transform, ref, moving)
    elif isinstance(transform, BSplineTransform):
        field_ = bspline_field(transform, ref)
    else:
        raise TypeError(f"cannot warp with {type(transform).__name__}")
    if field_.dims != ref.dims:
        raise ValueError(f"field dims {field_.dims} do not match reference {ref.dims}")
    coords = grid_coords(ref.dims) + field_.vectors
    return Volume(trilinear(moving.data, coords), ref.spacing, ref.affine)


def invert_field(field_: DisplacementField, iterations: int = 100, tol: float = 1e-10) -> DisplacementField:
    """Fixed-point inverse: w(y) = -v(y + w(y)), so (x -> x + v(x)) o (y -> y + w(y)) = id."""
    y = grid_coords(field_.dims)
    w = -field_.vectors.copy()
    for _ in range(iterations):
        w_new = -field_.sample(y + w)
        delta = float(np.max(np.abs(w_new - w)))
        w = w_new
        if delta < tol:
            break
    return DisplacementField(w, field_.spacing, field_.affine)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field of ``phi_outer(phi_inner(x))``."""
    x = grid_coords(inner.dims)
    p = x + inner.vectors
    return DisplacementField(inner.vectors + outer.sample(p), inner.spacing, inner.affine)

"""Cubic B-spline free-form deformation and its bending energy."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


def bspline3(t):
    """Centred cubic B-spline kernel, support (-2, 2)."""
    a = np.abs(np.asarray(t, dtype=np.float64))
    return np.where(a < 1, 2.0 / 3.0 - a**2 + 0.5 * a**3, np.where(a < 2, (2 - a) ** 3 / 6.0, 0.0))


def bspline3_d1(t):
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    return np.where(a < 1, -2 * t + 1.5 * t * a, np.where(a < 2, -np.sign(t) * 0.5 * (2 - a) ** 2, 0.0))


def bspline3_d2(t):
    a = np.abs(np.asarray(t, dtype=np.float64))
    return np.where(a < 1, -2 + 3 * a, np.where(a < 2, 2 - a, 0.0))


_KERNELS = (bspline3, bspline3_d1, bspline3_d2)


def control_grid_size(n_voxels: int, spacing: float) -> int:
    """Control points along one axis: the covered cells plus one ring each side."""
    return int(np.floor((n_voxels - 1) / spacing)) + 4


def basis_matrix(positions, n_ctrl: int, spacing: float, order: int = 0) -> np.ndarray:
    """``B[k, i]`` = (d/dx)^order of the basis of control point k at positions[i].

    Control point ``k`` sits at voxel coordinate ``(k - 1) * spacing``.
    """
    pos = np.asarray(positions, dtype=np.float64)
    t = pos[None, :] / spacing - (np.arange(n_ctrl, dtype=np.float64)[:, None] - 1)
    return _KERNELS[order](t) / spacing**order


def apply_separable(coef: np.ndarray, bx, by, bz) -> np.ndarray:
    """Evaluate ``sum_abc coef[a,b,c,:] bx[a,x] by[b,y] bz[c,z]`` -> (3, X, Y, Z)."""
    t = np.tensordot(bz, coef, axes=(0, 2))  # (Z, a, b, 3)
    t = np.tensordot(by, t, axes=(0, 2))  # (Y, Z, a, 3)
    t = np.tensordot(bx, t, axes=(0, 2))  # (X, Y, Z, 3)
    return np.moveaxis(t, 3, 0)


def apply_separable_T(g: np.ndarray, bx, by, bz) -> np.ndarray:
    """Adjoint of :func:`apply_separable`: (3, X, Y, Z) -> (a, b, c, 3)."""
    t = np.tensordot(g, bz, axes=(3, 1))  # (3, X, Y, c)
    t = np.tensordot(t, by, axes=(2, 1))  # (3, X, c, b)
    t = np.tensordot(t, bx, axes=(1, 1))  # (3, c, b, a)
    return np.transpose(t, (3, 2, 1, 0))


# (order_x, order_y, order_z, multiplicity) of the 9 second-derivative components
_SECOND_DERIVATIVES = (
    (2, 0, 0, 1.0),
    (0, 2, 0, 1.0),
    (0, 0, 2, 1.0),
    (1, 1, 0, 2.0),
    (1, 0, 1, 2.0),
    (0, 1, 1, 2.0),
)


@dataclass
class BSplineTransform:
    """Cubic B-spline displacement on a regular control lattice.

    ``coefficients`` has shape ``control_dims + (3,)`` and holds per-control
    point displacements in voxels; ``control_spacing`` is in voxels of the
    fixed grid ``domain``.
    """

    domain: tuple[int, int, int]
    control_spacing: tuple[float, float, float] = (8.0, 8.0, 8.0)
    coefficients: np.ndarray = field(default=None)  # type: ignore[assignment]
    status: str = field(default="converged", compare=False)

    def __post_init__(self):
        self.domain = tuple(int(n) for n in self.domain)
        if np.isscalar(self.control_spacing):
            self.control_spacing = (float(self.control_spacing),) * 3
        self.control_spacing = tuple(float(s) for s in self.control_spacing)
        shape = self.control_dims + (3,)
        if self.coefficients is None:
            self.coefficients = np.zeros(shape)
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.shape != shape:
            raise ValueError(f"coefficients must have shape {shape}, got {self.coefficients.shape}")

    @property
    def control_dims(self) -> tuple[int, int, int]:
        return tuple(control_grid_size(n, s) for n, s in zip(self.domain, self.control_spacing))  # type: ignore

    def control_positions(self) -> list[np.ndarray]:
        return [(np.arange(n) - 1) * s for n, s in zip(self.control_dims, self.control_spacing)]

    def bases(self, positions=None, order=(0, 0, 0)):
        if positions is None:
            positions = [np.arange(n, dtype=np.float64) for n in self.domain]
        return [
            basis_matrix(p, n, s, o)
            for p, n, s, o in zip(positions, self.control_dims, self.control_spacing, order)
        ]

    def displacement(self, positions=None) -> np.ndarray:
        """Displacement on the (sub)grid spanned by per-axis ``positions``."""
        return apply_separable(self.coefficients, *self.bases(positions))

    def displacement_at(self, points: np.ndarray) -> np.ndarray:
        """Displacement at scattered points of shape ``(3, ...)``."""
        pts = np.asarray(points, dtype=np.float64)
        shape = pts.shape[1:]
        pts = pts.reshape(3, -1)
        n = pts.shape[1]
        idx, w = [], []
        for a in range(3):
            u = pts[a] / self.control_spacing[a] + 1
            base = np.floor(u).astype(np.int64) - 1
            ks = base[None, :] + np.arange(4)[:, None]
            wa = bspline3(u[None, :] - ks)
            wa = np.where((ks >= 0) & (ks < self.control_dims[a]), wa, 0.0)
            idx.append(np.clip(ks, 0, self.control_dims[a] - 1))
            w.append(wa)
        nb, nc = self.control_dims[1], self.control_dims[2]
        # one flat array per component: gathers then read contiguous memory
        coef = [np.ascontiguousarray(self.coefficients[..., c]).ravel() for c in range(3)]
        out = np.zeros((3, n))
        for i in range(4):
            for j in range(4):
                wij = w[0][i] * w[1][j]
                ij = (idx[0][i] * nb + idx[1][j]) * nc
                for k in range(4):
                    flat = ij + idx[2][k]
                    wk = wij * w[2][k]
                    for c in range(3):
                        out[c] += wk * coef[c][flat]
        return out.reshape((3, *shape))

    @classmethod
    def from_function(cls, domain, control_spacing, fn) -> "BSplineTransform":
        """Coefficients ``fn(control_point_coords)`` (shape (3, a, b, c) -> (3, a, b, c)).

        Exact for affine ``fn``: cubic B-splines reproduce linear functions.
        """
        t = cls(domain, control_spacing)
        grids = np.stack(np.meshgrid(*t.control_positions(), indexing="ij"))
        t.coefficients = np.moveaxis(np.asarray(fn(grids), dtype=np.float64), 0, -1).copy()
        return t


@lru_cache(maxsize=64)
def _reduced_basis(n_voxels: int, n_ctrl: int, spacing: float, order: int) -> np.ndarray:
    """``R.T`` from a thin QR of the voxel basis ``B.T = Q R``.

    Since Q has orthonormal columns, ``|B.T c| = |R c|``: sums of squares over
    the voxel grid reduce to sums over at most ``n_ctrl`` terms per axis.
    """
    b = basis_matrix(np.arange(n_voxels, dtype=np.float64), n_ctrl, spacing, order)
    r = np.linalg.qr(b.T, mode="r").T.copy()
    r.setflags(write=False)
    return r


def bending_energy(t: BSplineTransform, spacing=(1.0, 1.0, 1.0), gradient: bool = False):
    """Sum over the fixed-grid voxels of all 9 squared second derivatives of
    each displacement component (per mm), times voxel volume.

    Each second-derivative field is formed separably (in a QR-reduced basis)
    and squared, so the energy is non-negative and vanishes to rounding for
    affine displacements.
    With ``gradient=True`` returns ``(energy, gradient)``.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    vox = float(np.prod(spacing))
    c = t.coefficients
    energy = 0.0
    grad = np.zeros_like(c)
    for ox, oy, oz, mult in _SECOND_DERIVATIVES:
        orders = (ox, oy, oz)
        bases = [_reduced_basis(n, k, s, o) for n, k, s, o in zip(t.domain, t.control_dims, t.control_spacing, orders)]
        # per-component weight: displacement to mm, derivatives per mm
        w = mult * vox * (spacing / np.prod(spacing ** np.array(orders))) ** 2
        d = apply_separable(c, *bases)
        wd = w[:, None, None, None] * d
        energy += float(np.sum(wd * d))
        if gradient:
            grad += 2 * apply_separable_T(wd, *bases)
    return (energy, grad) if gradient else energy

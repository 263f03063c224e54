"""Synthetic mini-template, 12-region atlas and atrophy phantoms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..registration.bspline import BSplineTransform
from ..registration.transforms import DisplacementField
from ..volume import LabelVolume, Volume, grid_coords, trilinear

REGION_NAMES = {
    1: "Frontal-Temporal",
    2: "Sub-lobar",
    3: "Temporal Lobe",
    4: "Limbic Lobe",
    5: "Frontal Lobe",
    6: "Midbrain",
    7: "Pons",
    8: "Parietal Lobe",
    9: "Posterior Lobe",
    10: "Medulla",
    11: "Anterior Lobe",
    12: "Occipital Lobe",
}

MODALITIES = ("MRI", "CT")

# region intensities on the MRI channel, indexed by label - 1
_MRI_LEVELS = np.array([0.55, 0.85, 0.40, 0.70, 0.95, 0.45, 0.80, 0.60, 0.35, 0.90, 0.50, 0.75])


def _region_seeds() -> np.ndarray:
    """12 seeds in unit-ball coordinates: 9 on a Fibonacci shell, 3 inner."""
    k = np.arange(9) + 0.5
    theta = np.arccos(1 - 2 * k / 9)
    phi = np.pi * (1 + 5**0.5) * k
    shell = 0.62 * np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1)
    ang = 2 * np.pi * np.arange(3) / 3
    inner = 0.22 * np.stack([np.cos(ang), np.sin(ang), np.zeros(3)], axis=1)
    return np.concatenate([shell, inner])


@dataclass(frozen=True)
class Template:
    """Built-in mini-template: one volume per modality plus the atlas."""

    images: dict
    atlas: LabelVolume

    @property
    def dims(self):
        return self.atlas.dims

    @property
    def brain_mask(self) -> np.ndarray:
        return self.atlas.labels > 0


def build_template(dims=(32, 32, 32)) -> Template:
    """Ellipsoidal 'brain' split into 12 Voronoi regions with textured intensities."""
    dims = tuple(int(n) for n in dims)
    x = grid_coords(dims)
    center = (np.array(dims, dtype=np.float64) - 1) / 2
    radii = 0.42 * np.array(dims, dtype=np.float64)
    unit = (x - center[:, None, None, None]) / radii[:, None, None, None]
    inside = np.sum(unit**2, axis=0) <= 1.0
    pts = unit[:, inside].T
    seeds = _region_seeds()
    # Lloyd relaxation makes the Voronoi cells compact and similar in size
    for _ in range(25):
        owner = np.argmin(np.sum((pts[:, None, :] - seeds[None]) ** 2, axis=2), axis=1)
        seeds = np.stack([pts[owner == k].mean(axis=0) for k in range(len(seeds))])
    owner = np.argmin(np.sum((pts[:, None, :] - seeds[None]) ** 2, axis=2), axis=1)
    labels = np.zeros(dims, dtype=np.int64)
    labels[inside] = owner + 1
    base = _MRI_LEVELS[np.clip(labels - 1, 0, 11)]
    texture = 0.06 * np.sin(2 * np.pi * unit[0] * 1.5) * np.cos(2 * np.pi * unit[1] * 1.25) + 0.04 * np.sin(
        2 * np.pi * (unit[2] + 0.5 * unit[0])
    )
    raw = np.where(inside, base + texture, 0.0)
    ct_raw = np.where(inside, 1.15 - raw, 0.0)
    mri = ndimage.gaussian_filter(raw, 0.6, mode="constant")
    ct = ndimage.gaussian_filter(ct_raw, 0.6, mode="constant")
    atlas = LabelVolume(labels, dict(REGION_NAMES))
    return Template({"MRI": Volume(mri), "CT": Volume(ct)}, atlas)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one synthetic subject.

    ``atrophy_factor`` is the volumetric shrink of ``atrophy_region``;
    ``variation`` is the amplitude (voxels) of the random anatomy warp drawn
    from ``seed``.
    """

    dims: tuple = (32, 32, 32)
    seed: int = 0
    atrophy_region: int = 3
    atrophy_factor: float = 1.0
    noise: float = 0.0
    variation: float = 0.0
    transition: float = 4.0
    control_spacing: float = 8.0

    def __post_init__(self):
        if not 0 < self.atrophy_factor <= 1:
            raise ValueError("atrophy_factor must be in (0, 1]")
        if self.noise < 0 or self.variation < 0:
            raise ValueError("noise and variation must be non-negative")


def _smootherstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (t * (6 * t - 15) + 10)


class RadialShrink:
    """Radial map with det(d phi/dx) = s inside radius r0, relaxing to the
    identity at r1 (C2, monotone, compact support)."""

    def __init__(self, center, s: float, r0: float, r1: float):
        self.center = np.asarray(center, dtype=np.float64)
        self.s, self.r0, self.r1 = float(s), float(r0), float(r1)

    def _w(self, r):
        return 1.0 - _smootherstep((r - self.r0) / (self.r1 - self.r0))

    def rho(self, r):
        return r * np.cbrt(1.0 + (self.s - 1.0) * self._w(r))

    def det(self, x):
        """Analytic Jacobian determinant of the forward map at points (3, ...)."""
        r = np.sqrt(np.sum((x - self._c(x)) ** 2, axis=0))
        t = np.clip((r - self.r0) / (self.r1 - self.r0), 0.0, 1.0)
        dw = -30 * t**2 * (1 - t) ** 2 / (self.r1 - self.r0)
        return 1.0 + (self.s - 1.0) * (self._w(r) + r * dw / 3.0)

    def _c(self, x):
        return self.center.reshape((3,) + (1,) * (x.ndim - 1))

    def forward(self, x):
        c = self._c(x)
        d = x - c
        r = np.sqrt(np.sum(d**2, axis=0))
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(r > 0, self.rho(r) / np.where(r > 0, r, 1.0), np.cbrt(self.s))
        return c + d * ratio

    def inverse(self, y):
        c = self._c(y)
        d = y - c
        rt = np.sqrt(np.sum(d**2, axis=0))
        r = np.where(rt >= self.r1, rt, rt / np.cbrt(self.s))
        mid = (rt > self.rho(self.r0)) & (rt < self.r1)
        if np.any(mid):
            lo = np.full(int(mid.sum()), self.r0)
            hi = np.full(int(mid.sum()), self.r1)
            target = rt[mid]
            for _ in range(60):
                m = 0.5 * (lo + hi)
                up = self.rho(m) < target
                lo = np.where(up, m, lo)
                hi = np.where(up, hi, m)
            r = r.copy()
            r[mid] = 0.5 * (lo + hi)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(rt > 0, r / np.where(rt > 0, rt, 1.0), 1.0)
        return c + d * ratio


def atrophy_map(template: Template, region: int, s: float, transition: float = 4.0) -> RadialShrink:
    mask = template.atlas.labels == region
    if not mask.any():
        raise ValueError(f"region {region} absent from atlas")
    pts = np.argwhere(mask).astype(np.float64)
    center = pts.mean(axis=0)
    r0 = float(np.sqrt(np.max(np.sum((pts - center) ** 2, axis=1)))) + 2.0
    return RadialShrink(center, s, r0, r0 + transition)


def _base_warp(spec: PhantomSpec) -> BSplineTransform | None:
    if spec.variation == 0:
        return None
    rng = np.random.default_rng([spec.seed, 7])
    t = BSplineTransform(spec.dims, spec.control_spacing)
    t.coefficients = rng.uniform(-spec.variation, spec.variation, size=t.coefficients.shape)
    return t


def _invert_bspline_at(t: BSplineTransform, y: np.ndarray, iterations: int = 60) -> np.ndarray:
    x = y.copy()
    for _ in range(iterations):
        x_new = y - t.displacement_at(x)
        if np.max(np.abs(x_new - x)) < 1e-12:
            return x_new
        x = x_new
    return x


def warp_labels(labels: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Pull labels back through ``coords``: trilinear-interpolate each one-hot
    channel and keep the arg-max (less aliasing than nearest neighbour)."""
    ids = [k for k in np.unique(labels).tolist() if k != 0]
    weights = np.stack([trilinear((labels == k).astype(np.float64), coords) for k in ids])
    # background absorbs the remainder, including samples falling off the grid
    weights = np.concatenate([1.0 - weights.sum(axis=0, keepdims=True), weights])
    return np.array([0, *ids], dtype=np.int64)[np.argmax(weights, axis=0)]


@dataclass(frozen=True)
class Phantom:
    images: dict
    labels: LabelVolume
    field: DisplacementField
    spec: PhantomSpec


def generate_phantom(spec: PhantomSpec, template: Template | None = None) -> Phantom:
    """Warp the template into a subject with a shrunken region.

    The ground-truth field maps template voxels to subject voxels
    (``phi = base o shrink``), i.e. what registering the subject (moving) to
    the template (fixed) should recover. Pure function of ``spec``.
    """
    template = template or build_template(spec.dims)
    if template.dims != tuple(spec.dims):
        raise ValueError(f"template dims {template.dims} != phantom dims {tuple(spec.dims)}")
    x = grid_coords(template.dims)
    shrink = atrophy_map(template, spec.atrophy_region, spec.atrophy_factor, spec.transition)
    base = _base_warp(spec)

    phi = shrink.forward(x) if spec.atrophy_factor < 1 else x.copy()
    if base is not None:
        phi = phi + base.displacement_at(phi)
    field = DisplacementField(phi - x, template.atlas.spacing, template.atlas.affine)

    # subject(y) = template(psi(y)) with psi = phi^-1
    psi = x.copy()
    if base is not None:
        psi = _invert_bspline_at(base, psi)
    if spec.atrophy_factor < 1:
        psi = shrink.inverse(psi)
    identity = base is None and spec.atrophy_factor == 1

    rng = np.random.default_rng([spec.seed, 11])
    images = {}
    for name in MODALITIES:
        tmpl = template.images[name]
        data = tmpl.data.copy() if identity else trilinear(tmpl.data, psi)
        if spec.noise > 0:
            data = data + rng.normal(0.0, spec.noise, size=data.shape)
        images[name] = tmpl.with_data(data)
    if identity:
        lab = template.atlas.labels.copy()
    else:
        lab = warp_labels(template.atlas.labels, psi)
    labels = LabelVolume(lab, template.atlas.names, template.atlas.spacing, template.atlas.affine)
    return Phantom(images, labels, field, spec)


def warped_region_volume(template: Template, phantom: Phantom, region: int) -> float:
    """Partial-volume size of ``region`` in the subject: the region indicator
    pulled back through the subject's own inverse map and summed."""
    x = grid_coords(template.dims)
    spec = phantom.spec
    psi = x.copy()
    base = _base_warp(spec)
    if base is not None:
        psi = _invert_bspline_at(base, psi)
    if spec.atrophy_factor < 1:
        psi = atrophy_map(template, spec.atrophy_region, spec.atrophy_factor, spec.transition).inverse(psi)
    indicator = (template.atlas.labels == region).astype(np.float64)
    return float(trilinear(indicator, psi).sum()) * template.atlas.as_volume().voxel_volume

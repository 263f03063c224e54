"""Multi-resolution affine and B-spline registration driven by Mattes MI."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..volume import Volume, trilinear
from .bspline import BSplineTransform, apply_separable, apply_separable_T, bending_energy
from .metric import ParzenMI
from .transforms import AffineTransform, DisplacementField, bspline_field

log = logging.getLogger(__name__)


@dataclass
class RegistrationConfig:
    alpha: float = 0.01
    bins: int = 32
    pyramid_levels: int = 3
    iterations: int = 60
    affine_iterations: int = 60
    step: float = 1.0
    min_step: float = 0.01
    control_spacing: float = 8.0
    kernel: str = "cubic"
    smoothing: float = 0.5
    # MI samples: fixed foreground (> threshold * max) dilated by margin voxels;
    # whole-volume sampling biases MI toward shrinking the background
    mask_threshold: float | None = 0.05
    mask_margin: int = 0
    sampling: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.bins < 4:
            raise ValueError("bins must be >= 4")
        if self.iterations < 1 or self.affine_iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.sampling <= 1:
            raise ValueError("sampling must be in (0, 1]")


@dataclass
class OptimizerTrace:
    costs: list[float] = field(default_factory=list)
    status: str = "converged"


def descend(fn, x0: np.ndarray, iterations: int, step: float, min_step: float,
            trace: OptimizerTrace | None = None) -> tuple[np.ndarray, str]:
    """Steepest descent with backtracking; only strictly improving steps are taken.

    ``fn(x, need_grad)`` returns ``(cost, grad or None)``. Directions are
    scaled so the largest parameter moves by exactly ``step``.
    """
    x = np.array(x0, dtype=np.float64)
    cost, grad = fn(x, True)
    if trace is not None:
        trace.costs.append(cost)
    for _ in range(iterations):
        gmax = float(np.max(np.abs(grad)))
        if gmax == 0.0:
            return x, "converged"
        direction = -grad / gmax
        while step >= min_step:
            trial = x + step * direction
            c_trial, _ = fn(trial, False)
            if c_trial < cost:
                break
            step *= 0.5
        else:
            return x, "converged"
        x = trial
        cost, grad = fn(x, True)
        if trace is not None:
            trace.costs.append(cost)
        step *= 1.5
    return x, "max_iterations"


class _Level:
    """Fixed samples and a (smoothed, downsampled) moving image at one pyramid level."""

    def __init__(self, fixed: Volume, moving: Volume, factor: int, cfg: RegistrationConfig,
                 moving_range, rng: np.random.Generator):
        self.factor = factor
        # the finest level is lightly smoothed too: it flattens the
        # interpolation cusps of the MI landscape at grid-aligned positions
        sigma = 0.5 * factor if factor > 1 else cfg.smoothing
        fdata = ndimage.gaussian_filter(fixed.data, sigma, mode="constant") if sigma > 0 else fixed.data
        mdata = ndimage.gaussian_filter(moving.data, sigma, mode="constant") if sigma > 0 else moving.data
        if factor > 1:
            fdims = [max(1, n // factor) for n in fixed.dims]
            mdims = [max(1, n // factor) for n in moving.dims]
            self.positions = [(np.arange(n) + 0.5) * factor - 0.5 for n in fdims]
            coords = np.stack(np.meshgrid(*self.positions, indexing="ij"))
            fvals = trilinear(fdata, coords)
            mpos = [(np.arange(n) + 0.5) * factor - 0.5 for n in mdims]
            self.moving = trilinear(mdata, np.stack(np.meshgrid(*mpos, indexing="ij")))
        else:
            self.positions = [np.arange(n, dtype=np.float64) for n in fixed.dims]
            fvals = fdata
            self.moving = mdata
        self.shape = tuple(len(p) for p in self.positions)
        self.coords = np.stack(np.meshgrid(*self.positions, indexing="ij")).reshape(3, -1)
        self.mask = None
        if cfg.mask_threshold is not None:
            fg = fvals > cfg.mask_threshold * float(fvals.max())
            if cfg.mask_margin > 0:
                fg = ndimage.binary_dilation(fg, iterations=cfg.mask_margin)
            if fg.any() and not fg.all():
                self.mask = fg.ravel()
        if cfg.sampling < 1.0:
            n = self.coords.shape[1]
            pool = np.flatnonzero(self.mask) if self.mask is not None else np.arange(n)
            self.mask = np.zeros(n, dtype=bool)
            self.mask[rng.choice(pool, size=max(1, int(cfg.sampling * len(pool))), replace=False)] = True
        fv = fvals.ravel() if self.mask is None else fvals.ravel()[self.mask]
        self.metric = ParzenMI(fv, (fixed.data.min(), fixed.data.max()), moving_range, cfg.bins, cfg.kernel)

    def similarity(self, phi: np.ndarray, need_grad: bool):
        """-MI at mapped points ``phi`` (3, n) in fine moving voxels, and d/dphi."""
        f = self.factor
        if self.mask is not None:
            phi = phi[:, self.mask]
        c = (phi + 0.5) / f - 0.5 if f > 1 else phi
        if not need_grad:
            m = trilinear(self.moving, c)
            return -self.metric.value(m), None
        m, dm = trilinear(self.moving, c, gradient=True)
        mi, g = self.metric.value_and_grad(m)
        d = -(g * dm) / f
        if self.mask is not None:
            full = np.zeros((3, self.coords.shape[1]))
            full[:, self.mask] = d
            d = full
        return -mi, d


def _moving_range(moving: Volume):
    return min(float(moving.data.min()), 0.0), float(moving.data.max())


def _levels(cfg: RegistrationConfig):
    return [2 ** k for k in reversed(range(cfg.pyramid_levels))]


def register_affine(fixed: Volume, moving: Volume, config: RegistrationConfig | None = None) -> AffineTransform:
    """Affine transform maximising Mattes MI, coarse to fine.

    The 12 parameters are scaled so that one unit moves the image corners by
    about one voxel. The returned transform's ``status`` is ``"converged"`` or
    ``"max_iterations"``.
    """
    cfg = config or RegistrationConfig()
    rng = np.random.default_rng(cfg.seed)
    M0, t0 = AffineTransform().voxel_map(fixed.affine, moving.affine)
    center = (np.array(fixed.dims, dtype=np.float64) - 1) / 2
    radius = float(np.linalg.norm(center)) or 1.0
    mrange = _moving_range(moving)
    q = np.zeros(12)
    status = "converged"
    for factor in _levels(cfg):
        level = _Level(fixed, moving, factor, cfg, mrange, rng)
        xc = level.coords - center[:, None]

        def fn(q, need_grad, level=level, xc=xc):
            P = np.eye(3) + q[:9].reshape(3, 3) / radius
            inner = center[:, None] + P @ xc + q[9:, None]
            phi = M0 @ inner + t0[:, None]
            cost, d = level.similarity(phi, need_grad)
            if not need_grad:
                return cost, None
            h = M0.T @ d
            return cost, np.concatenate([(h @ xc.T).ravel() / radius, h.sum(axis=1)])

        q, status = descend(fn, q, cfg.affine_iterations, cfg.step, cfg.min_step)
        log.debug("affine level x%d: %s", factor, status)
    P = np.eye(3) + q[:9].reshape(3, 3) / radius
    Mv = M0 @ P
    tv = M0 @ (center - P @ center + q[9:]) + t0
    out = AffineTransform.from_voxel_map(Mv, tv, fixed.affine, moving.affine)
    out.status = status
    return out


def register_bspline(fixed: Volume, moving: Volume, init: AffineTransform | None = None,
                     config: RegistrationConfig | None = None,
                     trace: OptimizerTrace | None = None) -> tuple[BSplineTransform, DisplacementField]:
    """Minimise ``-MI + alpha * bending_energy`` over B-spline coefficients.

    The exported field composes the initial affine map with the B-spline
    offset and is sampled on the fixed grid.
    """
    cfg = config or RegistrationConfig()
    init = init or AffineTransform()
    rng = np.random.default_rng(cfg.seed)
    M, t = init.voxel_map(fixed.affine, moving.affine)
    bs = BSplineTransform(fixed.dims, cfg.control_spacing)
    shape = bs.coefficients.shape
    mrange = _moving_range(moving)
    coef = np.zeros(bs.coefficients.size)
    status = "converged"
    for factor in _levels(cfg):
        level = _Level(fixed, moving, factor, cfg, mrange, rng)
        bases = bs.bases(level.positions)
        base_phi = M @ level.coords + t[:, None]

        def fn(c, need_grad, level=level, bases=bases, base_phi=base_phi):
            bs.coefficients = c.reshape(shape)
            u = apply_separable(bs.coefficients, *bases).reshape(3, -1)
            sim, d = level.similarity(base_phi + u, need_grad)
            if cfg.alpha > 0:
                be = bending_energy(bs, fixed.spacing, gradient=need_grad)
                if need_grad:
                    be, be_grad = be
            else:
                be, be_grad = 0.0, 0.0
            cost = sim + cfg.alpha * be
            if not need_grad:
                return cost, None
            g = apply_separable_T(d.reshape(3, *level.shape), *bases) + cfg.alpha * be_grad
            return cost, g.ravel()

        coef, status = descend(fn, coef, cfg.iterations, cfg.step, cfg.min_step, trace)
        log.debug("bspline level x%d: %s", factor, status)
    bs.coefficients = coef.reshape(shape)
    bs.status = status
    return bs, bspline_field(bs, fixed, init, moving)

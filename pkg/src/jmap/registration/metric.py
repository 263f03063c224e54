"""Mattes mutual information from a Parzen-windowed joint histogram."""
from __future__ import annotations

import numpy as np

from ..volume import Volume
from .bspline import bspline3, bspline3_d1


class _Binner:
    """Maps intensities in ``[lo, hi]`` to continuous bin coordinates."""

    def __init__(self, lo: float, hi: float, bins: int, kernel: str):
        self.lo, self.hi, self.bins, self.kernel = float(lo), float(hi), int(bins), kernel
        span = self.hi - self.lo
        if kernel == "cubic":
            # keep the 4-bin support inside [0, bins-1]
            self.scale = (bins - 3) / span
            self.offset = 1.0
        else:
            self.scale = (bins - 1) / span
            self.offset = 0.0

    def coords(self, values):
        return self.offset + (values - self.lo) * self.scale

    def weights(self, values, derivative: bool = False):
        """Per-voxel (bin index, weight[, dweight/dvalue]) for each window tap."""
        u = self.coords(values)
        if self.kernel != "cubic":
            idx = np.clip(np.rint(u).astype(np.int64), 0, self.bins - 1)
            one = np.ones_like(u)
            return [(idx, one, np.zeros_like(u))] if derivative else [(idx, one)]
        base = np.floor(u).astype(np.int64) - 1
        taps = []
        for a in range(4):
            k = base + a
            ok = (k >= 0) & (k < self.bins)
            kc = np.clip(k, 0, self.bins - 1)
            w = np.where(ok, bspline3(u - k), 0.0)
            if derivative:
                dw = np.where(ok, bspline3_d1(u - k), 0.0) * self.scale
                taps.append((kc, w, dw))
            else:
                taps.append((kc, w))
        return taps


def _entropy_terms(joint: np.ndarray):
    total = joint.sum()
    P = joint / total
    pm = P.sum(axis=1)
    pf = P.sum(axis=0)
    nz = P > 0
    denom = np.outer(pm, pf)
    mi = float(np.sum(P[nz] * np.log(P[nz] / denom[nz])))
    return P, pm, mi, total


class ParzenMI:
    """MI between a fixed sample set and moving intensities sampled at it.

    Bin ranges are frozen at construction so the metric is a smooth function
    of the moving intensities during optimisation.
    """

    def __init__(self, fixed_values, fixed_range, moving_range, bins: int = 32, kernel: str = "cubic"):
        if kernel not in ("cubic", "nearest"):
            raise ValueError(f"unknown Parzen kernel {kernel!r}")
        min_bins = 4 if kernel == "cubic" else 2
        if bins < min_bins:
            raise ValueError(f"bins must be >= {min_bins} for the {kernel} window")
        self.bins = int(bins)
        self.kernel = kernel
        self.fixed_values = np.asarray(fixed_values, dtype=np.float64).ravel()
        self.fixed_binner = _Binner(*fixed_range, bins, kernel)
        self.moving_binner = _Binner(*moving_range, bins, kernel)
        self.fixed_taps = self.fixed_binner.weights(self.fixed_values)

    def _joint(self, mtaps):
        B = self.bins
        joint = np.zeros(B * B)
        for im, wm, *_ in mtaps:
            for jf, wf in self.fixed_taps:
                joint += np.bincount(im * B + jf, weights=wm * wf, minlength=B * B)
        return joint.reshape(B, B)

    def value(self, moving_values) -> float:
        mtaps = self.moving_binner.weights(np.asarray(moving_values, dtype=np.float64).ravel())
        return _entropy_terms(self._joint(mtaps))[2]

    def value_and_grad(self, moving_values):
        """MI and dMI/d(moving value) per sample."""
        mv = np.asarray(moving_values, dtype=np.float64).ravel()
        mtaps = self.moving_binner.weights(mv, derivative=True)
        P, pm, mi, total = _entropy_terms(self._joint(mtaps))
        with np.errstate(divide="ignore", invalid="ignore"):
            L = np.where(P > 0, np.log(P / pm[:, None]), 0.0)
        g = np.zeros_like(mv)
        for im, _, dwm in mtaps:
            for jf, wf in self.fixed_taps:
                g += dwm * wf * L[im, jf]
        return mi, g / total


def mattes_mi(fixed: Volume, moving_warped: Volume, bins: int = 32, kernel: str = "cubic") -> float:
    """Mutual information of two same-sized volumes (natural log).

    Each volume's intensities are rescaled from its own [min, max] into bin
    space; the same Parzen window is used on both axes, so the value is
    symmetric in its arguments. Returns 0 if either volume is constant.
    """
    a = fixed.data if isinstance(fixed, Volume) else np.asarray(fixed, dtype=np.float64)
    b = moving_warped.data if isinstance(moving_warped, Volume) else np.asarray(moving_warped, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.max() <= a.min() or b.max() <= b.min():
        return 0.0
    metric = ParzenMI(a, (a.min(), a.max()), (b.min(), b.max()), bins, kernel)
    return metric.value(b)

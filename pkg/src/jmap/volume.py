"""Volumes, label volumes, minimal NIfTI-1 I/O and trilinear resampling.

Voxel data are stored as ``(W, H, D)`` arrays indexed ``[x, y, z]`` (the
on-disk NIfTI order, x fastest). Everything is float64 internally; files
hold float32.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype (little-endian)
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    256: np.dtype("<i1"),
    512: np.dtype("<u2"),
    768: np.dtype("<u4"),
}


class NiftiError(ValueError):
    """Raised for files outside the supported NIfTI-1 subset.

    ``field`` names the offending header field.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class VolumeError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with physical spacing and a grid-to-world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeError(f"spacing must be three positive numbers, got {self.spacing}")
        if self.affine is None:
            affine = np.diag([*spacing, 1.0])
        else:
            affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
            raise VolumeError("affine must be a finite 4x4 matrix")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise VolumeError("affine is singular")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _frozen(affine))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new voxel values."""
        return Volume(data, self.spacing, self.affine)

    def sample(self, p) -> float:
        return sample_trilinear(self, p)


@dataclass(frozen=True)
class LabelVolume:
    """Integer label grid sharing Volume geometry; label 0 is background."""

    labels: np.ndarray
    names: dict[int, str]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeError("labels must be 3D")
        if labels.size and (not np.all(np.equal(np.mod(labels, 1), 0)) or labels.min() < 0):
            raise VolumeError("labels must be non-negative integers")
        labels = labels.astype(np.int64)
        names = {int(k): str(v) for k, v in self.names.items()}
        missing = sorted(set(np.unique(labels).tolist()) - {0} - set(names))
        if missing:
            raise VolumeError(f"labels without names: {missing}")
        geom = Volume(np.zeros((1, 1, 1)), self.spacing, self.affine)
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "spacing", geom.spacing)
        object.__setattr__(self, "affine", geom.affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)  # type: ignore[return-value]

    def region_ids(self) -> list[int]:
        return sorted(k for k in self.names if k != 0)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def as_volume(self) -> Volume:
        return Volume(self.labels.astype(np.float64), self.spacing, self.affine)


# --------------------------------------------------------------------------
# NIfTI-1 I/O


def _build_header(vol: Volume) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    W, H, D = vol.dims
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, W, H, D, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)
    struct.pack_into("<h", hdr, 72, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)
    struct.pack_into("<B", hdr, 123, 2)  # mm
    struct.pack_into("<h", hdr, 254, 2)  # sform_code: aligned
    for row in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * row, *vol.affine[row])
    hdr[344:348] = MAGIC
    return bytes(hdr)


def write_nifti(volume: Volume, path) -> None:
    """Write a single-file float32 NIfTI-1 image (header + 4 pad bytes + data).

    Spacing and affine are stored as float32, so they survive a round trip
    bit-exactly only when float32-representable.
    """
    if not np.all(np.isfinite(volume.data)):
        raise VolumeError("refusing to serialize non-finite values")
    payload = np.asarray(volume.data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(_build_header(volume))
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)


def read_nifti_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiError("sizeof_hdr", f"file shorter than {HEADER_SIZE} bytes")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError("sizeof_hdr", f"expected 348 (little-endian), got {sizeof_hdr}")
    if raw[344:348] != MAGIC:
        raise NiftiError("magic", f"bad magic {raw[344:348]!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, bitpix = struct.unpack_from("<2h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    srows = [struct.unpack_from("<4f", raw, 280 + 16 * r) for r in range(3)]
    return dict(
        dim=dim,
        datatype=datatype,
        bitpix=bitpix,
        pixdim=pixdim,
        vox_offset=vox_offset,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        qform_code=qform_code,
        sform_code=sform_code,
        srows=srows,
    )


def read_nifti(path) -> Volume:
    """Read a 3D single-file NIfTI-1 image into a float64 Volume."""
    raw = Path(path).read_bytes()
    h = read_nifti_header(raw)
    if h["dim"][0] != 3 and not (h["dim"][0] > 3 and all(d == 1 for d in h["dim"][4 : h["dim"][0] + 1])):
        raise NiftiError("dim", f"expected 3 dimensions, got dim[0]={h['dim'][0]}")
    dims = h["dim"][1:4]
    if min(dims) < 1:
        raise NiftiError("dim", f"non-positive extent {dims}")
    dtype = _DTYPES.get(h["datatype"])
    if dtype is None:
        raise NiftiError("datatype", f"unsupported datatype code {h['datatype']}")
    if h["bitpix"] != dtype.itemsize * 8:
        raise NiftiError("bitpix", f"{h['bitpix']} inconsistent with datatype {h['datatype']}")
    offset = int(h["vox_offset"])
    if offset < VOX_OFFSET:
        raise NiftiError("vox_offset", f"{h['vox_offset']} < 352")
    n = int(np.prod(dims))
    need = offset + n * dtype.itemsize
    if len(raw) < need:
        raise NiftiError("vox_offset", f"truncated payload: need {need} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).astype(np.float64)
    data = data.reshape(dims, order="F")
    slope, inter = h["scl_slope"], h["scl_inter"]
    if slope not in (0.0, 1.0) or (slope != 0.0 and inter != 0.0):
        data = data * slope + inter
    spacing = tuple(abs(float(p)) for p in h["pixdim"][1:4])
    if min(spacing) <= 0:
        raise NiftiError("pixdim", f"non-positive spacing {spacing}")
    if h["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3] = np.array(h["srows"], dtype=np.float64)
    else:
        affine = np.diag([*spacing, 1.0])
    return Volume(data, spacing, affine)


def write_labels(labels: LabelVolume, path) -> None:
    """Labels as a float32 NIfTI plus a ``.json`` sidecar of region names."""
    write_nifti(labels.as_volume(), path)
    Path(str(path) + ".json").write_text(json.dumps({str(k): v for k, v in sorted(labels.names.items())}, indent=1))


def read_labels(path) -> LabelVolume:
    vol = read_nifti(path)
    sidecar = Path(str(path) + ".json")
    names = {int(k): v for k, v in json.loads(sidecar.read_text()).items()} if sidecar.exists() else {}
    lab = np.rint(vol.data).astype(np.int64)
    for k in np.unique(lab).tolist():
        if k:
            names.setdefault(k, f"region_{k}")
    return LabelVolume(lab, names, vol.spacing, vol.affine)


def write_rvol(volume: Volume, path) -> None:
    """Raw debug format: 3 x u32 dims, 3 x f64 spacing, f64 payload (x fastest)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *volume.dims))
        fh.write(struct.pack("<3d", *volume.spacing))
        fh.write(np.asarray(volume.data, dtype="<f8").ravel(order="F").tobytes())


def read_rvol(path) -> Volume:
    raw = Path(path).read_bytes()
    dims = struct.unpack_from("<3I", raw, 0)
    spacing = struct.unpack_from("<3d", raw, 12)
    n = int(np.prod(dims))
    if len(raw) < 36 + 8 * n:
        raise VolumeError("truncated .rvol payload")
    data = np.frombuffer(raw, dtype="<f8", count=n, offset=36).reshape(dims, order="F")
    return Volume(data, spacing)


def load_volume(path) -> Volume:
    return read_rvol(path) if str(path).endswith(".rvol") else read_nifti(path)


# --------------------------------------------------------------------------
# Interpolation


def trilinear(data: np.ndarray, coords: np.ndarray, gradient: bool = False):
    """Trilinear interpolation of ``data`` at continuous voxel coordinates.

    ``coords`` has shape ``(3, ...)``. Neighbours outside the grid count as
    zero. With ``gradient=True`` also returns the analytic spatial derivative
    of the interpolant, shape ``(3, ...)``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    shape = coords.shape[1:]
    x, y, z = (c.ravel() for c in coords)
    nx, ny, nz = data.shape
    x0 = np.floor(x)
    y0 = np.floor(y)
    z0 = np.floor(z)
    fx, fy, fz = x - x0, y - y0, z - z0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    z0 = z0.astype(np.int64)
    flat = data.ravel()

    def corner(i, j, k):
        xi, yj, zk = x0 + i, y0 + j, z0 + k
        ok = (xi >= 0) & (xi < nx) & (yj >= 0) & (yj < ny) & (zk >= 0) & (zk < nz)
        idx = (np.clip(xi, 0, nx - 1) * ny + np.clip(yj, 0, ny - 1)) * nz + np.clip(zk, 0, nz - 1)
        return np.where(ok, flat[idx], 0.0)

    c000 = corner(0, 0, 0)
    c100 = corner(1, 0, 0)
    c010 = corner(0, 1, 0)
    c110 = corner(1, 1, 0)
    c001 = corner(0, 0, 1)
    c101 = corner(1, 0, 1)
    c011 = corner(0, 1, 1)
    c111 = corner(1, 1, 1)
    # interpolate along x, then y, then z
    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    out = c0 + fz * (c1 - c0)
    if not gradient:
        return out.reshape(shape)
    dz = c1 - c0
    dy = (1 - fz) * (c10 - c00) + fz * (c11 - c01)
    gx00 = c100 - c000
    gx10 = c110 - c010
    gx01 = c101 - c001
    gx11 = c111 - c011
    dx = (1 - fz) * ((1 - fy) * gx00 + fy * gx10) + fz * ((1 - fy) * gx01 + fy * gx11)
    return out.reshape(shape), np.stack([dx, dy, dz]).reshape((3, *shape))


def sample_trilinear(volume: Volume, p) -> float:
    """Value at one continuous grid coordinate ``p = (x, y, z)`` (zero padded)."""
    return float(trilinear(volume.data, np.asarray(p, dtype=np.float64).reshape(3, 1))[0])


def grid_coords(dims) -> np.ndarray:
    """Voxel-index coordinates of every voxel, shape ``(3, W, H, D)``."""
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"))


def resample(volume: Volume, target_dims, target_spacing) -> Volume:
    """Resample onto a grid covering the same physical extent.

    Voxel ``i`` of the output has its centre at input coordinate
    ``(i + 0.5) * t / s - 0.5`` along each axis.
    """
    target_dims = tuple(int(n) for n in target_dims)
    target_spacing = tuple(float(s) for s in target_spacing)
    if min(target_dims) < 1 or min(target_spacing) <= 0:
        raise VolumeError("target dims and spacing must be positive")
    ratio = np.array(target_spacing) / np.array(volume.spacing)
    axes = [(np.arange(n) + 0.5) * r - 0.5 for n, r in zip(target_dims, ratio)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    # edge-replicating clamp keeps the physical extent free of zero-padding roll-off
    for a, n in enumerate(volume.dims):
        coords[a] = np.clip(coords[a], 0, n - 1)
    out = trilinear(volume.data, coords)
    scale = np.eye(4)
    scale[:3, :3] = np.diag(ratio)
    scale[:3, 3] = 0.5 * ratio - 0.5
    return Volume(out, target_spacing, volume.affine @ scale)


# --------------------------------------------------------------------------
# Intensity standardisation and brain masking


def normalize_intensity(volume: Volume, lower: float = 1.0, upper: float = 99.0) -> Volume:
    """Clip to the [lower, upper] percentiles, then min-max scale to [0, 1].

    A constant volume maps to all zeros.
    """
    d = volume.data
    lo, hi = np.percentile(d, [lower, upper])
    if hi <= lo:
        lo, hi = float(d.min()), float(d.max())
    if hi <= lo:
        return volume.with_data(np.zeros_like(d))
    return volume.with_data((np.clip(d, lo, hi) - lo) / (hi - lo))


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    hist, edges = np.histogram(values, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(np.float64)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = np.divide(m0, w0, out=np.zeros_like(m0), where=w0 > 0)
    mu1 = np.divide(m0[-1] - m0, w1, out=np.zeros_like(m0), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    # threshold sits at the upper edge of the best lower class
    return float(edges[int(np.argmax(between[:-1])) + 1])


def mask_brain(volume: Volume, threshold_fraction: float | None = None) -> tuple[Volume, LabelVolume]:
    """Threshold (Otsu by default, else ``threshold_fraction * max``) and keep
    the largest 6-connected component.

    Returns the masked volume and a binary LabelVolume (1 = brain).
    """
    d = volume.data
    if d.max() <= d.min():
        empty = np.zeros(volume.dims, dtype=np.int64)
        return volume.with_data(np.zeros_like(d)), LabelVolume(empty, {1: "brain"}, volume.spacing, volume.affine)
    if threshold_fraction is None:
        thr = otsu_threshold(d)
        fg = d >= thr
    else:
        fg = d > threshold_fraction * d.max()
    lab, n = ndimage.label(fg)
    if n == 0:
        mask = np.zeros_like(fg)
    else:
        sizes = np.bincount(lab.ravel())
        sizes[0] = 0
        mask = lab == int(np.argmax(sizes))
    masked = volume.with_data(np.where(mask, d, 0.0))
    return masked, LabelVolume(mask.astype(np.int64), {1: "brain"}, volume.spacing, volume.affine)


def values(x) -> np.ndarray:
    """Voxel array of a Volume-like object or of a plain array (whose own
    ``data`` attribute is a raw buffer, hence the isinstance check)."""
    return x if isinstance(x, np.ndarray) else np.asarray(getattr(x, "data", x), dtype=np.float64)

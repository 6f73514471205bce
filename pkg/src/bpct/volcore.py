"""Volume and projection-image containers, synthetic phantoms, binary IO.

Axis conventions used throughout the package:

* volumes are float32 arrays of shape (depth, height, width), C order, so
  the width index varies fastest on disk;
* projection images are float32 arrays of shape (height, width);
* a frontal image integrates over depth (axis 0), a lateral image over
  width (axis 2); see the projector module for the exact pixel mapping.

File formats are little-endian with fixed 8-byte magics:

* volume:  b"CTVOL1\\0\\0", three u32 dims (d, h, w), then d*h*w f32
* image:   b"DRRIMG1\\0", two u32 dims (h, w), one u8 view tag, then h*w f32
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

VOLUME_MAGIC = b"CTVOL1\x00\x00"
DRR_MAGIC = b"DRRIMG1\x00"

# Sanity bounds for untrusted headers. 2048^3 voxels is far beyond anything
# this package produces but still small enough to reject absurd allocations.
MAX_DIM = 2048
MAX_VOXELS = 2048 ** 3


class FormatError(Exception):
    """Base class for malformed volume/image/checkpoint files."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedError(FormatError):
    """File ends before the header or payload is complete."""


class DimOverflowError(FormatError):
    """Header declares zero, oversized, or overflowing dimensions."""


class View(enum.Enum):
    FRONTAL = 0
    LATERAL = 1

    @classmethod
    def from_byte(cls, b):
        try:
            return cls(b)
        except ValueError:
            raise FormatError(f"unknown view tag {b}") from None


@dataclass
class CtVolume:
    """Voxel grid, float32, shape (depth, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume must be 3-D (d, h, w), got shape {arr.shape}")
        self.data = arr

    @property
    def dims(self):
        return self.data.shape


@dataclass
class DrrImage:
    """Projection image, float32, shape (height, width), tagged with its view."""

    data: np.ndarray
    view: View

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"image must be 2-D (h, w), got shape {arr.shape}")
        if not isinstance(self.view, View):
            raise ValueError(f"view must be a View, got {self.view!r}")
        self.data = arr


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned soft ellipsoid in voxel coordinates.

    center and semi_axes are (z, y, x) triples in units of voxels; intensity
    is the peak value at the center. The contribution at a point with
    normalized squared radius rho2 is intensity * max(0, 1 - rho2).
    """

    center: tuple
    semi_axes: tuple
    intensity: float

    def __post_init__(self):
        if len(self.center) != 3 or len(self.semi_axes) != 3:
            raise ValueError("center and semi_axes must be (z, y, x) triples")
        if min(self.semi_axes) <= 0:
            raise ValueError(f"semi axes must be positive, got {self.semi_axes}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must be in [0, 1], got {self.intensity}")


@dataclass(frozen=True)
class PhantomSpec:
    """Cube edge length plus the ellipsoids that fill it."""

    n: int
    ellipsoids: tuple

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"phantom edge must be >= 1, got {self.n}")


def random_spec(n, n_ellipsoids, seed, intensity_lo=0.3, intensity_hi=1.0):
    """Deterministic random phantom layout from a PCG64 stream."""
    if n < 4:
        raise ValueError(f"phantom edge must be >= 4, got {n}")
    if n_ellipsoids < 1:
        raise ValueError(f"need at least one ellipsoid, got {n_ellipsoids}")
    if not 0.0 <= intensity_lo <= intensity_hi <= 1.0:
        raise ValueError(f"bad intensity range [{intensity_lo}, {intensity_hi}]")
    rng = np.random.default_rng(seed)
    ellipsoids = []
    for _ in range(n_ellipsoids):
        center = tuple(rng.uniform(0.25 * n, 0.75 * n, size=3))
        semi = tuple(rng.uniform(0.10 * n, 0.30 * n, size=3))
        inten = float(rng.uniform(intensity_lo, intensity_hi))
        ellipsoids.append(Ellipsoid(center, semi, inten))
    return PhantomSpec(n=n, ellipsoids=tuple(ellipsoids))


def make_phantom(spec):
    """Rasterize a PhantomSpec onto voxel centers (index + 0.5).

    Overlapping ellipsoids combine by elementwise max (not sum) and the
    result is clamped to [0, 1]. Evaluation is in float64, cast to float32
    at the end, so the oracle in the tests can reproduce values exactly.
    """
    n = spec.n
    coords = np.arange(n, dtype=np.float64) + 0.5
    z = coords[:, None, None]
    y = coords[None, :, None]
    x = coords[None, None, :]
    vol = np.zeros((n, n, n), dtype=np.float64)
    for e in spec.ellipsoids:
        cz, cy, cx = (float(c) for c in e.center)
        az, ay, ax = (float(a) for a in e.semi_axes)
        rho2 = ((z - cz) / az) ** 2 + ((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2
        np.maximum(vol, e.intensity * np.maximum(0.0, 1.0 - rho2), out=vol)
    return CtVolume(np.clip(vol, 0.0, 1.0).astype(np.float32))


def normalize_window(vol, lo, hi):
    """Clip voxel values to [lo, hi] and rescale that window to [0, 1]."""
    if not hi > lo:
        raise ValueError(f"window needs hi > lo, got [{lo}, {hi}]")
    clipped = np.clip(vol.data.astype(np.float64), lo, hi)
    return CtVolume(((clipped - lo) / (hi - lo)).astype(np.float32))


# ---------------------------------------------------------------------------
# binary IO


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"expected {n} bytes for {what}, got {len(buf)}")
    return buf


def _check_dims(dims):
    total = 1
    for d in dims:
        if d < 1 or d > MAX_DIM:
            raise DimOverflowError(f"dimension {d} outside [1, {MAX_DIM}] in {dims}")
        total *= d
    if total > MAX_VOXELS:
        raise DimOverflowError(f"element count {total} exceeds limit {MAX_VOXELS}")
    return total


def save_volume(vol, path):
    d, h, w = vol.dims
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<III", d, h, w))
        fh.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def load_volume(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(VOLUME_MAGIC), "magic")
        if magic != VOLUME_MAGIC:
            raise BadMagicError(f"bad volume magic {magic!r}")
        dims = struct.unpack("<III", _read_exact(fh, 12, "dims"))
        total = _check_dims(dims)
        payload = _read_exact(fh, 4 * total, "voxel payload")
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after voxel payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return CtVolume(data.copy())


def save_drr(img, path):
    h, w = img.data.shape
    with open(path, "wb") as fh:
        fh.write(DRR_MAGIC)
        fh.write(struct.pack("<IIB", h, w, img.view.value))
        fh.write(np.ascontiguousarray(img.data, dtype="<f4").tobytes())


def load_drr(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(DRR_MAGIC), "magic")
        if magic != DRR_MAGIC:
            raise BadMagicError(f"bad image magic {magic!r}")
        h, w, view_tag = struct.unpack("<IIB", _read_exact(fh, 9, "dims"))
        total = _check_dims((h, w))
        view = View.from_byte(view_tag)
        payload = _read_exact(fh, 4 * total, "pixel payload")
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after pixel payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return DrrImage(data.copy(), view)


def to_pgm_bytes(img2d):
    """8-bit binary PGM of a [0, 1] image, for quick visual inspection."""
    arr = np.asarray(img2d, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {arr.shape}")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    return header + u8.tobytes()

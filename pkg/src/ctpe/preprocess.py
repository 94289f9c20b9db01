"""HU windowing, volume resizing, and rotation augmentation.

The pipeline order is fixed: window-normalize raw HU volumes, resize to
the uniform model input shape, then (for training data only) produce the
six rotated copies.  Rotation fill is 0.0, which after normalization is
the air end of every window in the catalog.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .volume import Unit, Volume, _sample_grid


@dataclass(frozen=True)
class HuWindow:
    """A (lo, hi) Hounsfield clamp-and-rescale range."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError(f"window bounds must be finite, got ({self.lo}, {self.hi})")
        if not self.lo < self.hi:
            raise ValueError(f"window lower bound must be below upper bound, got ({self.lo}, {self.hi})")

    def __str__(self) -> str:
        return f"{self.lo:+.0f}..{self.hi:+.0f}"


#: The ten canonical windows: air-based lows (-1000) and lung-based lows (-700),
#: each paired with the five upper bounds from +80 to +800.
WINDOW_CATALOG: tuple[HuWindow, ...] = tuple(
    HuWindow(lo, hi) for lo in (-1000.0, -700.0) for hi in (80.0, 130.0, 270.0, 400.0, 800.0)
)


@dataclass(frozen=True)
class AugmentationPlan:
    """Ordered rotation angles applied by :func:`augment_six`."""

    angles_degrees: tuple[float, ...] = (-20.0, -10.0, -5.0, 5.0, 10.0, 20.0)

    def __post_init__(self):
        if len(self.angles_degrees) != 6:
            raise ValueError(f"augmentation plan must hold exactly 6 angles, got {len(self.angles_degrees)}")
        if sorted(self.angles_degrees) != sorted(-a for a in self.angles_degrees):
            raise ValueError("augmentation angles must be symmetric about zero")


DEFAULT_AUGMENTATION = AugmentationPlan()


def window_normalize(vol: Volume, window: HuWindow) -> Volume:
    """Clamp to [window.lo, window.hi] and rescale linearly onto [0, 1]."""
    if vol.unit is not Unit.HOUNSFIELD:
        raise StateError("window_normalize expects a Hounsfield-unit volume; input is already normalized")
    scaled = (np.clip(vol.data, window.lo, window.hi) - window.lo) / (window.hi - window.lo)
    # interpolation-free, but guard the float32 division's last ulp anyway
    scaled = np.clip(scaled.astype(np.float32), 0.0, 1.0)
    return Volume(scaled, spacing=vol.spacing, origin=vol.origin, unit=Unit.NORMALIZED)


def resize_trilinear(vol: Volume, target: tuple[int, int, int]) -> Volume:
    """Resample to ``target`` dims with align-centers trilinear sampling.

    Output voxel centers map to ``(i + 0.5) * n / t - 0.5`` in source
    coordinates; sampling is edge-clamped so borders replicate instead of
    darkening.  Spacing is rescaled to preserve physical extent.
    """
    tx, ty, tz = (int(t) for t in target)
    if min(tx, ty, tz) < 1:
        raise ValueError(f"target dims must be positive, got {target}")
    nx, ny, nz = vol.dims
    if (tx, ty, tz) == (nx, ny, nz):
        return vol

    def centers(n: int, t: int) -> np.ndarray:
        return (np.arange(t, dtype=np.float64) + 0.5) * (n / t) - 0.5

    xs, ys, zs = np.meshgrid(centers(nx, tx), centers(ny, ty), centers(nz, tz), indexing="ij")
    out = _sample_grid(vol.data, xs, ys, zs, clamp=True).astype(np.float32)
    if vol.unit is Unit.NORMALIZED:
        out = np.clip(out, 0.0, 1.0)
    spacing = (vol.spacing[0] * nx / tx, vol.spacing[1] * ny / ty, vol.spacing[2] * nz / tz)
    return Volume(out, spacing=spacing, origin=vol.origin, unit=vol.unit)


def _rotation_cos_sin(angle_degrees: float) -> tuple[float, float]:
    # exact values at quarter turns so 0/90/180/270 degenerate to pure
    # index permutations instead of within-ulp interpolation
    if angle_degrees % 90.0 == 0.0:
        quarter = int(angle_degrees / 90.0) % 4
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[quarter]
    rad = math.radians(angle_degrees)
    return math.cos(rad), math.sin(rad)


def rotate_axial(vol: Volume, angle_degrees: float) -> Volume:
    """Rotate every axial (x, y) slice about the slice center.

    Positive angles rotate counterclockwise in the (x, y) plane.  Uses
    inverse mapping with trilinear sampling and fill 0.0; dims unchanged.
    """
    if not math.isfinite(angle_degrees):
        raise ValueError(f"rotation angle must be finite, got {angle_degrees}")
    if vol.unit is not Unit.NORMALIZED:
        raise StateError("rotate_axial expects a normalized volume; augmentation follows normalization")
    if angle_degrees % 360.0 == 0.0:
        return vol

    nx, ny, nz = vol.dims
    c, s = _rotation_cos_sin(angle_degrees)
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    ix, iy = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64), indexing="ij")
    dx, dy = ix - cx, iy - cy
    # inverse map: rotate output coordinates by -angle to find the source
    src_x = (c * dx + s * dy + cx)[:, :, None]
    src_y = (-s * dx + c * dy + cy)[:, :, None]
    src_z = np.broadcast_to(np.arange(nz, dtype=np.float64), (nx, ny, nz))
    out = _sample_grid(vol.data, src_x, src_y, src_z, fill=0.0).astype(np.float32)
    out = np.clip(out, 0.0, 1.0)
    return Volume(out, spacing=vol.spacing, origin=vol.origin, unit=vol.unit)


def augment_six(vol: Volume, plan: AugmentationPlan = DEFAULT_AUGMENTATION) -> list[Volume]:
    """One rotated copy per plan angle, in plan order."""
    return [rotate_axial(vol, angle) for angle in plan.angles_degrees]

"""Voxel-grid container and sampling primitives shared by the whole pipeline.

A :class:`Volume` is an immutable 3D scalar grid.  Conceptually the data is
stored x-fastest (flat index ``i + j*nx + k*nx*ny``), which makes axial
slices contiguous and matches the on-disk order used by the NIfTI writer;
in memory it is held as a float32 array indexed ``[i, j, k]``.

Geometry (spacing, origin) is carried at float32 precision so that a
volume survives a file round trip bit-for-bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import StateError


class Unit(enum.Enum):
    HOUNSFIELD = "hounsfield"
    NORMALIZED = "normalized"


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D scalar grid with voxel spacing and origin in millimeters.

    ``data`` is indexed ``[i, j, k]`` for x, y, z and is always float32 and
    read-only after construction.  ``unit`` declares whether voxels are raw
    Hounsfield units or already window-normalized to [0, 1].
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    unit: Unit = Unit.HOUNSFIELD

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3-D with positive extents, got shape {arr.shape}")
        arr = arr.copy(order="F")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        origin = tuple(float(np.float32(o)) for o in self.origin)
        if len(spacing) != 3 or any(not math.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three strictly positive finite values, got {self.spacing}")
        if len(origin) != 3 or any(not math.isfinite(o) for o in origin):
            raise ValueError(f"origin must be three finite values, got {self.origin}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        if self.unit is Unit.NORMALIZED:
            lo, hi = float(arr.min()), float(arr.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"normalized volume has values outside [0, 1]: min {lo}, max {hi}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_count(self) -> int:
        return int(self.data.size)


def get_voxel(vol: Volume, i: int, j: int, k: int) -> float:
    """Value at integer voxel index (i, j, k)."""
    nx, ny, nz = vol.dims
    for axis, (idx, n) in enumerate(zip((i, j, k), (nx, ny, nz))):
        if not 0 <= idx < n:
            raise IndexError(f"index {idx} out of bounds for axis {'xyz'[axis]} with extent {n}")
    return float(vol.data[i, j, k])


def sample_trilinear(vol: Volume, x: float, y: float, z: float, fill: float = 0.0) -> float:
    """Trilinear interpolation at a continuous voxel coordinate.

    The eight surrounding lattice points are blended; lattice points that
    fall outside the grid contribute ``fill``.  Sampling exactly at an
    integer lattice point reproduces that voxel value exactly.
    """
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
        raise ValueError(f"sample coordinates must be finite, got ({x}, {y}, {z})")
    if not math.isfinite(fill):
        raise ValueError(f"fill value must be finite, got {fill}")
    out = _sample_grid(
        vol.data,
        np.asarray([x], dtype=np.float64),
        np.asarray([y], dtype=np.float64),
        np.asarray([z], dtype=np.float64),
        fill=fill,
    )
    return float(out[0])


def _sample_grid(
    data: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    zs: np.ndarray,
    *,
    fill: float | None = None,
    clamp: bool = False,
) -> np.ndarray:
    """Vectorized trilinear sampling at arbitrary coordinate arrays.

    ``clamp=True`` replicates edge voxels (used by resize so borders do not
    darken); otherwise out-of-grid lattice corners contribute ``fill``.
    Returns float64 to keep interpolation weights at full precision; the
    caller decides the storage dtype.
    """
    nx, ny, nz = data.shape
    if clamp:
        xs = np.clip(xs, 0.0, nx - 1.0)
        ys = np.clip(ys, 0.0, ny - 1.0)
        zs = np.clip(zs, 0.0, nz - 1.0)

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    z0 = np.floor(zs).astype(np.int64)
    tx = xs - x0
    ty = ys - y0
    tz = zs - z0

    acc = np.zeros(np.broadcast(xs, ys, zs).shape, dtype=np.float64)
    for dx in (0, 1):
        wx = tx if dx else 1.0 - tx
        cx = x0 + dx
        for dy in (0, 1):
            wy = ty if dy else 1.0 - ty
            cy = y0 + dy
            for dz in (0, 1):
                wz = tz if dz else 1.0 - tz
                cz = z0 + dz
                w = wx * wy * wz
                if clamp:
                    vals = data[np.clip(cx, 0, nx - 1), np.clip(cy, 0, ny - 1), np.clip(cz, 0, nz - 1)]
                else:
                    inside = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny) & (cz >= 0) & (cz < nz)
                    vals = np.where(
                        inside,
                        data[np.where(inside, cx, 0), np.where(inside, cy, 0), np.where(inside, cz, 0)],
                        fill,
                    )
                acc += w * vals
    return acc

"""Single-file NIfTI-1 (.nii) reader and writer.

Supported subset, chosen so golden tests are bit-exact:

* single-file form only (magic ``n+1\\0``), little-endian only;
* datatype 4 (int16) for Hounsfield volumes and 16 (float32) for
  normalized volumes, ``scl_slope``/``scl_inter`` written as 1/0;
* a 348-byte header, a 4-byte zero extension indicator, voxel data at
  offset 352 in x-fastest order (the standard NIfTI layout, matching
  :class:`~ctpe.volume.Volume`'s flat order);
* orientation written as identity (``qform_code`` 1, ``sform_code`` 1
  with the spacing on the diagonal) since the pipeline itself never
  resamples by orientation but downstream viewers need a valid code.

Anything else (NIfTI-2, ``.hdr``/``.img`` pairs, compression, other
datatypes) is rejected loudly.
"""

from __future__ import annotations

import io
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedError
from .volume import Unit, Volume

HEADER_SIZE = 348
DATA_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
DTYPE_INT16 = 4
DTYPE_FLOAT32 = 16

_I16_MIN, _I16_MAX = -32768, 32767


@contextmanager
def _as_stream(source, mode: str):
    if isinstance(source, (str, Path)):
        with open(source, mode) as fh:
            yield fh
    else:
        yield source


def _pack_header(vol: Volume, datatype: int, bitpix: int) -> bytes:
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    h = bytearray(HEADER_SIZE)
    struct.pack_into("<i", h, 0, HEADER_SIZE)  # sizeof_hdr
    struct.pack_into("<8h", h, 40, 3, nx, ny, nz, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", h, 70, datatype)
    struct.pack_into("<h", h, 72, bitpix)
    struct.pack_into("<8f", h, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)  # pixdim, qfac=1
    struct.pack_into("<f", h, 108, float(DATA_OFFSET))  # vox_offset
    struct.pack_into("<f", h, 112, 1.0)  # scl_slope
    struct.pack_into("<f", h, 116, 0.0)  # scl_inter
    struct.pack_into("<b", h, 123, 2)  # xyzt_units: millimeters
    descrip = b"ctpe toolkit"
    h[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<h", h, 252, 1)  # qform_code
    struct.pack_into("<h", h, 254, 1)  # sform_code
    struct.pack_into("<3f", h, 256, 0.0, 0.0, 0.0)  # quatern b, c, d: identity
    struct.pack_into("<3f", h, 268, ox, oy, oz)  # qoffset
    struct.pack_into("<4f", h, 280, sx, 0.0, 0.0, ox)  # srow_x
    struct.pack_into("<4f", h, 296, 0.0, sy, 0.0, oy)  # srow_y
    struct.pack_into("<4f", h, 312, 0.0, 0.0, sz, oz)  # srow_z
    h[344:348] = MAGIC_SINGLE
    return bytes(h)


def write_nifti(vol: Volume, destination) -> int:
    """Write ``vol`` as a single-file NIfTI-1; returns bytes written.

    Hounsfield volumes are stored as int16 (values rounded to nearest;
    out-of-range values raise), normalized volumes as float32.
    """
    if vol.unit is Unit.HOUNSFIELD:
        rounded = np.rint(vol.data)
        bad = (rounded < _I16_MIN) | (rounded > _I16_MAX)
        if bad.any():
            worst = float(vol.data[bad].flat[0])
            raise ValueError(f"HU value {worst} outside the int16 storage range [{_I16_MIN}, {_I16_MAX}]")
        payload = rounded.astype("<i2").tobytes(order="F")
        header = _pack_header(vol, DTYPE_INT16, 16)
    else:
        payload = vol.data.astype("<f4").tobytes(order="F")
        header = _pack_header(vol, DTYPE_FLOAT32, 32)

    with _as_stream(destination, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")  # extension indicator: none
        fh.write(payload)
    return HEADER_SIZE + 4 + len(payload)


def read_nifti(source) -> Volume:
    """Read a single-file NIfTI-1 produced by this toolkit (or compatible).

    int16 files yield Hounsfield volumes, float32 files normalized ones;
    ``scl_slope``/``scl_inter`` are applied when the slope is nonzero.
    """
    with _as_stream(source, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"file too short for a NIfTI-1 header: {len(raw)} bytes")

    magic = raw[344:348]
    if magic == MAGIC_PAIR:
        raise UnsupportedError("two-file NIfTI (.hdr/.img, magic 'ni1') is not supported; use single-file .nii")
    if magic != MAGIC_SINGLE:
        raise FormatError(f"bad NIfTI magic {magic!r}; expected {MAGIC_SINGLE!r}")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise FormatError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE} (byte-swapped or corrupt file)")

    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise FormatError(f"only 3-D volumes are supported, header declares rank {dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise FormatError(f"non-positive extent in header dims ({nx}, {ny}, {nz})")

    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype == DTYPE_INT16:
        np_dtype, itemsize, unit = np.dtype("<i2"), 2, Unit.HOUNSFIELD
    elif datatype == DTYPE_FLOAT32:
        np_dtype, itemsize, unit = np.dtype("<f4"), 4, Unit.NORMALIZED
    else:
        raise UnsupportedError(f"unsupported NIfTI datatype code {datatype}; only 4 (int16) and 16 (float32)")

    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = (pixdim[1], pixdim[2], pixdim[3])
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset)
    if offset < DATA_OFFSET:
        raise FormatError(f"vox_offset {offset} overlaps the header")
    slope, inter = struct.unpack_from("<2f", raw, 112)
    qoffset = struct.unpack_from("<3f", raw, 268)

    count = nx * ny * nz
    end = offset + count * itemsize
    if len(raw) < end:
        raise FormatError(f"payload truncated: need {count} voxels ({end - offset} bytes), file has {len(raw) - offset}")
    stored = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset)
    data = stored.astype(np.float32)
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = data * np.float32(slope) + np.float32(inter)
    data = data.reshape((nx, ny, nz), order="F")
    return Volume(data, spacing=spacing, origin=qoffset, unit=unit)

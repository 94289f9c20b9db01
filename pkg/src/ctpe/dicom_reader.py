"""Minimal CT DICOM slice parser and series assembly.

Format notes — the supported subset
-----------------------------------
A slice file must be DICOM Part-10: a 128-byte preamble, the ``DICM``
magic, then Explicit VR Little Endian data elements.  If the file meta
group carries (0002,0010) TransferSyntaxUID it must name Explicit VR
Little Endian (1.2.840.10008.1.2.1); compressed and implicit-VR syntaxes
are rejected by UID.  Pixel data must be uncompressed 16-bit, signed or
unsigned per (0028,0103).  Elements with undefined (0xFFFFFFFF) length —
in practice sequences and encapsulated pixel data — are rejected rather
than guessed at; every defined-length element we do not recognize is
skipped, so private tags are harmless.

Extracted tags::

    (0028,0010) Rows                    US  required
    (0028,0011) Columns                 US  required
    (0028,0030) PixelSpacing            DS  required, "row\\col" mm
    (0018,0050) SliceThickness          DS  required, mm
    (0020,0032) ImagePositionPatient    DS  required, z component used
    (0028,1052) RescaleIntercept        DS  optional, default 0 (warned)
    (0028,1053) RescaleSlope            DS  optional, default 1 (warned)
    (0028,0100) BitsAllocated           US  must be 16 when present
    (0028,0103) PixelRepresentation     US  0 unsigned / 1 signed, default 1
    (7FE0,0010) PixelData               OW/OB  required, rows*cols*2 bytes

Hounsfield conversion (``slope * stored + intercept``) happens in
:func:`assemble_series`; parsing itself never rescales.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, FormatError, UnsupportedError
from .volume import Unit, Volume

log = logging.getLogger(__name__)

EXPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2.1"

# VRs whose element header carries a 2-byte reserved field and a 4-byte length
_LONG_VRS = {b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"}

_TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
_TAG_ROWS = (0x0028, 0x0010)
_TAG_COLS = (0x0028, 0x0011)
_TAG_PIXEL_SPACING = (0x0028, 0x0030)
_TAG_SLICE_THICKNESS = (0x0018, 0x0050)
_TAG_IMAGE_POSITION = (0x0020, 0x0032)
_TAG_RESCALE_INTERCEPT = (0x0028, 0x1052)
_TAG_RESCALE_SLOPE = (0x0028, 0x1053)
_TAG_BITS_ALLOCATED = (0x0028, 0x0100)
_TAG_PIXEL_REPRESENTATION = (0x0028, 0x0103)
_TAG_PIXEL_DATA = (0x7FE0, 0x0010)


@dataclass
class SliceRecord:
    """One parsed CT slice: geometry, rescale coefficients, stored pixels."""

    rows: int
    cols: int
    pixel_spacing: tuple[float, float]  # (row_mm, col_mm)
    slice_thickness: float
    image_position_z: float
    rescale_slope: float
    rescale_intercept: float
    stored_pixels: np.ndarray  # (rows, cols), int16 or uint16

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError(f"slice extents must be positive, got {self.rows}x{self.cols}")
        if self.stored_pixels.shape != (self.rows, self.cols):
            raise ValueError(
                f"stored pixel grid {self.stored_pixels.shape} does not match {self.rows}x{self.cols}"
            )
        if self.rescale_slope == 0:
            raise ValueError("rescale slope must be nonzero")


def _decimal_strings(tag_name: str, payload: bytes, expect: int) -> list[float]:
    text = payload.decode("ascii", errors="strict").strip("\x00 ")
    parts = [p.strip() for p in text.split("\\")]
    if len(parts) != expect:
        raise FormatError(f"{tag_name} holds {len(parts)} values, expected {expect}: {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"{tag_name} is not a decimal string: {text!r}") from exc


def _unsigned_short(tag_name: str, payload: bytes) -> int:
    if len(payload) != 2:
        raise FormatError(f"{tag_name} (US) must be 2 bytes, got {len(payload)}")
    return struct.unpack("<H", payload)[0]


def parse_dicom_slice(data: bytes) -> SliceRecord:
    """Parse one Part-10 Explicit-VR-Little-Endian CT slice file."""
    if len(data) < 132 or data[128:132] != b"DICM":
        raise FormatError("missing DICM magic at offset 128; not a DICOM Part-10 file")

    elements: dict[tuple[int, int], bytes] = {}
    pos = 132
    n = len(data)
    while pos < n:
        if pos + 8 > n:
            raise FormatError(f"truncated element header at offset {pos}")
        group, elem = struct.unpack_from("<HH", data, pos)
        vr = data[pos + 4 : pos + 6]
        if not (vr.isalpha() and vr.isupper()):
            raise FormatError(f"invalid VR {vr!r} at offset {pos}; only Explicit VR Little Endian is supported")
        if vr in _LONG_VRS:
            if pos + 12 > n:
                raise FormatError(f"truncated element header at offset {pos}")
            (length,) = struct.unpack_from("<I", data, pos + 8)
            value_start = pos + 12
        else:
            (length,) = struct.unpack_from("<H", data, pos + 6)
            value_start = pos + 8
        if length == 0xFFFFFFFF:
            raise UnsupportedError(
                f"element ({group:04X},{elem:04X}) has undefined length; sequences and "
                "encapsulated pixel data are outside the supported subset"
            )
        value_end = value_start + length
        if value_end > n:
            raise FormatError(
                f"element ({group:04X},{elem:04X}) declares {length} bytes but only "
                f"{n - value_start} remain"
            )
        elements[(group, elem)] = data[value_start:value_end]
        pos = value_end

    if _TAG_TRANSFER_SYNTAX in elements:
        uid = elements[_TAG_TRANSFER_SYNTAX].decode("ascii").strip("\x00 ")
        if uid != EXPLICIT_VR_LITTLE_ENDIAN:
            raise UnsupportedError(f"unsupported transfer syntax {uid}; only {EXPLICIT_VR_LITTLE_ENDIAN}")

    def require(tag: tuple[int, int], name: str) -> bytes:
        if tag not in elements:
            raise FormatError(f"required tag ({tag[0]:04X},{tag[1]:04X}) {name} is missing")
        return elements[tag]

    rows = _unsigned_short("Rows", require(_TAG_ROWS, "Rows"))
    cols = _unsigned_short("Columns", require(_TAG_COLS, "Columns"))
    row_mm, col_mm = _decimal_strings("PixelSpacing", require(_TAG_PIXEL_SPACING, "PixelSpacing"), 2)
    (thickness,) = _decimal_strings("SliceThickness", require(_TAG_SLICE_THICKNESS, "SliceThickness"), 1)
    position = _decimal_strings("ImagePositionPatient", require(_TAG_IMAGE_POSITION, "ImagePositionPatient"), 3)

    if _TAG_RESCALE_SLOPE in elements:
        (slope,) = _decimal_strings("RescaleSlope", elements[_TAG_RESCALE_SLOPE], 1)
    else:
        log.warning("RescaleSlope absent; defaulting to 1 (stored values treated as already scaled)")
        slope = 1.0
    if _TAG_RESCALE_INTERCEPT in elements:
        (intercept,) = _decimal_strings("RescaleIntercept", elements[_TAG_RESCALE_INTERCEPT], 1)
    else:
        log.warning("RescaleIntercept absent; defaulting to 0")
        intercept = 0.0

    if _TAG_BITS_ALLOCATED in elements:
        bits = _unsigned_short("BitsAllocated", elements[_TAG_BITS_ALLOCATED])
        if bits != 16:
            raise UnsupportedError(f"BitsAllocated {bits} is not supported; only 16-bit pixel data")
    representation = 1
    if _TAG_PIXEL_REPRESENTATION in elements:
        representation = _unsigned_short("PixelRepresentation", elements[_TAG_PIXEL_REPRESENTATION])
        if representation not in (0, 1):
            raise FormatError(f"PixelRepresentation must be 0 or 1, got {representation}")

    pixels = require(_TAG_PIXEL_DATA, "PixelData")
    expected = rows * cols * 2
    if len(pixels) != expected:
        raise FormatError(f"PixelData holds {len(pixels)} bytes, expected {expected} for {rows}x{cols} 16-bit")
    dtype = np.dtype("<i2") if representation == 1 else np.dtype("<u2")
    grid = np.frombuffer(pixels, dtype=dtype).reshape(rows, cols)

    return SliceRecord(
        rows=rows,
        cols=cols,
        pixel_spacing=(row_mm, col_mm),
        slice_thickness=thickness,
        image_position_z=position[2],
        rescale_slope=slope,
        rescale_intercept=intercept,
        stored_pixels=grid,
    )


def assemble_series(slices: list[SliceRecord]) -> Volume:
    """Stack slice records (sorted by z position) into one Hounsfield volume.

    Voxel values are ``slope * stored + intercept``, exactly, with no
    normalization at this stage.  Inter-slice spacing comes from the mean
    gap between sorted z positions — the authoritative geometry — while
    SliceThickness stays metadata on the records.
    """
    if len(slices) < 2:
        raise ConsistencyError(f"a series needs at least 2 slices, got {len(slices)}")
    first = slices[0]
    for i, s in enumerate(slices[1:], start=1):
        if (s.rows, s.cols) != (first.rows, first.cols):
            raise ConsistencyError(
                f"slice {i} is {s.rows}x{s.cols} but slice 0 is {first.rows}x{first.cols}"
            )
        if s.pixel_spacing != first.pixel_spacing:
            raise ConsistencyError(
                f"slice {i} pixel spacing {s.pixel_spacing} differs from {first.pixel_spacing}"
            )
    zs = [s.image_position_z for s in slices]
    if len(set(zs)) != len(zs):
        raise ConsistencyError("duplicate slice z positions in series")

    ordered = sorted(slices, key=lambda s: s.image_position_z)
    nz = len(ordered)
    gap = (ordered[-1].image_position_z - ordered[0].image_position_z) / (nz - 1)
    nx, ny = first.cols, first.rows

    data = np.empty((nx, ny, nz), dtype=np.float32, order="F")
    for k, s in enumerate(ordered):
        hu = s.rescale_slope * s.stored_pixels.astype(np.float64) + s.rescale_intercept
        data[:, :, k] = hu.astype(np.float32).T  # (rows, cols) -> (x=col, y=row)

    spacing = (first.pixel_spacing[1], first.pixel_spacing[0], gap)
    origin = (0.0, 0.0, ordered[0].image_position_z)
    return Volume(data, spacing=spacing, origin=origin, unit=Unit.HOUNSFIELD)

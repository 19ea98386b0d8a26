"""Minimal NIfTI-1 single-file reader/writer (``.nii`` / ``.nii.gz``).

Only little-endian, axis-aligned files with uint8, int16 or float32 payloads
are supported. The ``descrip`` header field carries what kind of object a
file holds: ``label`` for masks, ``units:<u>`` for scalar volumes and
``disp:voxel`` / ``disp:mm`` for 4D displacement fields.
"""
from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .transform import DisplacementField
from .volume import Grid3, LabelMask, Volume3, clamp_hu

HEADER_SIZE = 348
VOX_OFFSET = 352

DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
DTYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16}


class NiftiError(ValueError):
    """Base class for unreadable or unsupported NIfTI files."""


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class DimensionError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


class ByteOrderError(NiftiError):
    pass


class ObliqueAffineError(NiftiError):
    pass


class VectorFieldError(NiftiError):
    pass


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, path) -> dict:
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: file shorter than the 348-byte header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise ByteOrderError(f"{path}: big-endian NIfTI files are not supported")
        raise NiftiError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise BadMagicError(f"{path}: bad magic string {magic!r}, expected b'n+1\\x00'")
    h = {
        "dim": struct.unpack_from("<8h", raw, 40),
        "datatype": struct.unpack_from("<h", raw, 70)[0],
        "pixdim": struct.unpack_from("<8f", raw, 76),
        "vox_offset": struct.unpack_from("<f", raw, 108)[0],
        "scl_slope": struct.unpack_from("<f", raw, 112)[0],
        "scl_inter": struct.unpack_from("<f", raw, 116)[0],
        "descrip": raw[148:228].split(b"\x00", 1)[0].decode("ascii", "replace"),
        "qform_code": struct.unpack_from("<h", raw, 252)[0],
        "sform_code": struct.unpack_from("<h", raw, 254)[0],
        "quatern": struct.unpack_from("<3f", raw, 256),
        "qoffset": struct.unpack_from("<3f", raw, 268),
        "srow": np.array(struct.unpack_from("<12f", raw, 280), dtype=float).reshape(3, 4),
    }
    ndim = h["dim"][0]
    if not 1 <= ndim <= 7:
        raise DimensionError(f"{path}: invalid dim[0] = {ndim}")
    return h


def _grid_from_header(h: dict, dims, path) -> Grid3:
    spacing = tuple(abs(float(p)) for p in h["pixdim"][1:4])
    if h["sform_code"] > 0:
        rot = h["srow"][:, :3]
        if np.any(np.abs(rot - np.diag(np.diag(rot))) > 1e-6 * np.abs(rot).max()):
            raise ObliqueAffineError(f"{path}: oblique sform affines are not supported")
        origin = tuple(float(v) for v in h["srow"][:, 3])
    else:
        b, c, d = h["quatern"]
        if h["qform_code"] > 0 and max(abs(b), abs(c), abs(d)) > 1e-6:
            a2 = max(0.0, 1.0 - (b * b + c * c + d * d))
            a = np.sqrt(a2)
            rot = np.array([
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ])
            if np.any(np.abs(rot - np.diag(np.diag(rot))) > 1e-6):
                raise ObliqueAffineError(f"{path}: oblique qform affines are not supported")
        origin = tuple(float(v) for v in h["qoffset"])
    return Grid3(tuple(int(d) for d in dims), spacing, origin)


def _payload(raw: bytes, h: dict, n_values: int, path) -> np.ndarray:
    code = h["datatype"]
    if code not in DTYPES:
        raise UnsupportedDatatypeError(
            f"{path}: unsupported datatype code {code} (supported: uint8, int16, float32)")
    dtype = DTYPES[code]
    offset = int(h["vox_offset"])
    need = offset + n_values * dtype.itemsize
    if len(raw) < need:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(raw)} of {need} bytes)")
    return np.frombuffer(raw, dtype=dtype, count=n_values, offset=offset)


def _apply_scaling(values: np.ndarray, h: dict) -> np.ndarray:
    slope, inter = float(h["scl_slope"]), float(h["scl_inter"])
    if slope == 0.0 or not np.isfinite(slope):
        return values
    if slope == 1.0 and inter == 0.0:
        return values
    return values.astype(np.float64) * slope + inter


def load_nifti(path, kind: str | None = None, units: str | None = None):
    """Read a scalar NIfTI file as a :class:`Volume3` or :class:`LabelMask`.

    ``kind`` forces ``"image"`` or ``"mask"``; by default files written as
    masks (``descrip == "label"``) load as masks and everything else as an
    image. Images whose units are HU are clamped to the CT range.
    """
    raw = _read_bytes(path)
    h = _parse_header(raw, path)
    if h["descrip"].startswith("disp:"):
        raise VectorFieldError(f"{path}: vector field, expected scalar")
    ndim = h["dim"][0]
    dims = list(h["dim"][1:1 + ndim])
    if ndim > 3 and any(d != 1 for d in dims[3:]):
        raise DimensionError(f"{path}: {ndim}D image with non-singleton extra dims {dims[3:]}")
    dims = (dims + [1, 1, 1])[:3]
    if min(dims) < 1:
        raise DimensionError(f"{path}: non-positive dimension in {dims}")
    grid = _grid_from_header(h, dims, path)
    values = _payload(raw, h, int(np.prod(dims)), path)
    values = _apply_scaling(values, h).reshape(dims, order="F")

    if kind is None:
        kind = "mask" if h["descrip"] == "label" else "image"
    if kind == "mask":
        return LabelMask(grid, values)
    if kind != "image":
        raise ValueError(f"unknown kind {kind!r}")
    if units is None:
        units = "dimensionless" if h["descrip"] == "units:dimensionless" else "HU"
    data = values.astype(np.float64)
    if units == "HU":
        data = clamp_hu(data)
    return Volume3(grid, data, units)


def load_field(path) -> DisplacementField:
    raw = _read_bytes(path)
    h = _parse_header(raw, path)
    ndim = h["dim"][0]
    dims = list(h["dim"][1:1 + ndim])
    if ndim != 4 or dims[3] != 3:
        raise DimensionError(f"{path}: displacement fields must be 4D with dim[4] = 3, got {dims}")
    grid = _grid_from_header(h, dims[:3], path)
    values = _payload(raw, h, int(np.prod(dims)), path)
    values = _apply_scaling(values, h).astype(np.float64).reshape(dims, order="F")
    u = np.moveaxis(values, 3, 0)
    if h["descrip"] == "disp:mm":
        u = u / np.asarray(grid.spacing).reshape(3, 1, 1, 1)
    elif h["descrip"] not in ("disp:voxel", ""):
        raise NiftiError(f"{path}: unknown displacement units in descrip {h['descrip']!r}")
    return DisplacementField(grid, u)


def _header(grid: Grid3, dim, datatype: int, bitpix: int, descrip: str) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *(list(dim) + [1] * (8 - len(dim))))
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *grid.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)
    struct.pack_into("<f", hdr, 116, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    d = descrip.encode("ascii")[:79]
    hdr[148:148 + len(d)] = d
    struct.pack_into("<h", hdr, 252, 1)
    struct.pack_into("<h", hdr, 254, 1)
    struct.pack_into("<3f", hdr, 268, *grid.origin)
    srow = np.zeros((3, 4))
    srow[:, :3] = np.diag(grid.spacing)
    srow[:, 3] = grid.origin
    struct.pack_into("<12f", hdr, 280, *srow.ravel())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x00\x00\x00\x00"


def _cast(values: np.ndarray, dtype: str) -> np.ndarray:
    target = DTYPES[DTYPE_CODES[dtype]]
    if target.kind in "iu":
        info = np.iinfo(target)
        if np.any(values != np.round(values)) or values.min() < info.min or values.max() > info.max:
            raise ValueError(f"values do not fit losslessly in {dtype}")
    return values.astype(target)


def save_nifti(obj, path, dtype: str | None = None, field_units: str = "voxel") -> None:
    """Write a volume, mask or displacement field as NIfTI-1 (gzip if ``path`` ends in .gz)."""
    if isinstance(obj, DisplacementField):
        if field_units not in ("voxel", "mm"):
            raise ValueError("field_units must be 'voxel' or 'mm'")
        u = obj.u if field_units == "voxel" else obj.to_mm()
        values = np.moveaxis(u, 0, 3)
        dim = [4, *obj.grid.dims, 3]
        descrip = f"disp:{field_units}"
        dtype = dtype or "float32"
        grid = obj.grid
    elif isinstance(obj, LabelMask):
        values = obj.labels
        dim = [3, *obj.grid.dims]
        descrip = "label"
        if dtype is None:
            dtype = "uint8" if values.max(initial=0) < 256 else "int16"
        grid = obj.grid
    elif isinstance(obj, Volume3):
        values = obj.data
        dim = [3, *obj.grid.dims]
        descrip = f"units:{obj.intensity_units}"
        dtype = dtype or "float32"
        grid = obj.grid
    else:
        raise TypeError(f"cannot save object of type {type(obj).__name__}")
    if dtype not in DTYPE_CODES:
        raise ValueError(f"unsupported output dtype {dtype!r}")
    payload = _cast(np.asarray(values, dtype=np.float64), dtype)
    code = DTYPE_CODES[dtype]
    raw = _header(grid, dim, code, payload.dtype.itemsize * 8, descrip)
    raw += payload.tobytes(order="F")
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw, compresslevel=6, mtime=0)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(raw)
    os.replace(tmp, path)

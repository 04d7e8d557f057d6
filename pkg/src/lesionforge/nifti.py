"""Minimal NIfTI-1 reader/writer for single-file 3D volumes (.nii / .nii.gz).

Scope: spatial dims only (trailing dims must be singleton), datatypes uint8,
int16, int32, float32 and float64, sform preferred over qform. Written files
always carry an sform and are byte-deterministic (gzip mtime pinned to 0).
"""

import gzip
import math
import struct
from pathlib import Path

import numpy as np

from .volume import Geometry, LabelVolume, LesionMask, ScalarVolume

HEADER_SIZE = 348
DATA_OFFSET = 352  # header + 4-byte extension flag
_MAGIC_SINGLE = b"n+1\x00"
_GZIP_LEVEL = 6

_DTYPE_BY_CODE = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODE_BY_DTYPE = {v: k for k, v in _DTYPE_BY_CODE.items()}


class NiftiFormatError(ValueError):
    """Raised for files outside the supported NIfTI-1 subset."""


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _unpack(fmt, buf, offset):
    return struct.unpack_from(fmt, buf, offset)


def _qform_affine(b, c, d, qx, qy, qz, pixdim):
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = math.sqrt(a_sq) if a_sq > 0 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scales = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = r * scales[np.newaxis, :]
    affine[:3, 3] = (qx, qy, qz)
    return affine


def read_nifti(path):
    """Read a NIfTI-1 file into a LabelVolume (integer data) or ScalarVolume.

    Geometry comes from the sform when its code is positive, else the qform,
    else a pixdim-scaled identity. Integer payloads are preserved losslessly;
    integer data with negative values or nontrivial scl scaling comes back as
    a ScalarVolume.
    """
    raw = _read_bytes(path)
    if len(raw) < DATA_OFFSET:
        raise NiftiFormatError(f"corrupt header: file too short ({len(raw)} bytes)")

    order = "<"
    (sizeof_hdr,) = _unpack("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        order = ">"
        (sizeof_hdr,) = _unpack(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiFormatError("corrupt header: bad sizeof_hdr")
    magic = raw[344:348]
    if magic != _MAGIC_SINGLE:
        raise NiftiFormatError(f"unsupported magic {magic!r} (single-file NIfTI-1 only)")

    dim = _unpack(order + "8h", raw, 40)
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise NiftiFormatError(f"corrupt header: dim[0] = {ndim}")
    for extra in range(4, ndim + 1):
        if dim[extra] > 1:
            raise NiftiFormatError(
                f"unsupported dimensionality: dim[0]={ndim} with non-singleton dim[{extra}]"
            )
    dims = tuple(max(1, int(dim[i])) if i <= ndim else 1 for i in (1, 2, 3))

    (datatype_code,) = _unpack(order + "h", raw, 70)
    dtype = _DTYPE_BY_CODE.get(datatype_code)
    if dtype is None:
        raise NiftiFormatError(f"unsupported datatype code {datatype_code}")

    pixdim = _unpack(order + "8f", raw, 76)
    (vox_offset,) = _unpack(order + "f", raw, 108)
    scl_slope, scl_inter = _unpack(order + "2f", raw, 112)
    (qform_code,) = _unpack(order + "h", raw, 252)
    (sform_code,) = _unpack(order + "h", raw, 254)

    if sform_code > 0:
        srow = _unpack(order + "12f", raw, 280)
        affine = np.eye(4)
        affine[0, :] = srow[0:4]
        affine[1, :] = srow[4:8]
        affine[2, :] = srow[8:12]
    elif qform_code > 0:
        b, c, d, qx, qy, qz = _unpack(order + "6f", raw, 256)
        affine = _qform_affine(b, c, d, qx, qy, qz, pixdim)
    else:
        affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])

    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise NiftiFormatError("non-invertible affine")

    start = int(vox_offset)
    count = dims[0] * dims[1] * dims[2]
    nbytes = count * dtype.itemsize
    if start < HEADER_SIZE or len(raw) < start + nbytes:
        raise NiftiFormatError("corrupt header: data extent exceeds file size")
    data = np.frombuffer(raw, dtype=dtype.newbyteorder(order), count=count, offset=start)
    data = data.astype(dtype)  # native byte order
    data = data.reshape(dims, order="F")

    geom = Geometry.from_affine(dims, affine)
    scaled = scl_slope not in (0.0, 1.0) or scl_inter != 0.0
    if np.issubdtype(dtype, np.integer) and not scaled and data.min() >= 0:
        return LabelVolume(geom, data)
    out = data.astype(np.float64)
    if scaled:
        out = out * scl_slope + scl_inter
    return ScalarVolume(geom, out)


def _output_dtype(vol) -> np.dtype:
    if isinstance(vol, LesionMask):
        return np.dtype(np.uint8)
    if isinstance(vol, LabelVolume):
        return np.dtype(np.int32)
    if vol.data.dtype == np.float32:
        return np.dtype(np.float32)
    return np.dtype(np.float64)


def write_nifti(vol, path) -> None:
    """Write a volume as single-file NIfTI-1, gzipped when the path ends in .gz.

    Integer payloads round-trip bit-exactly through read_nifti; the affine is
    stored as the sform (float32 fields, the format's precision limit).
    """
    path = Path(path)
    dtype = _output_dtype(vol)
    data = np.asarray(vol.data, dtype=dtype)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODE_BY_DTYPE[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(DATA_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    affine = np.asarray(vol.affine, dtype=np.float64)
    struct.pack_into("<12f", hdr, 280, *affine[0, :], *affine[1, :], *affine[2, :])
    struct.pack_into("<4s", hdr, 344, _MAGIC_SINGLE)

    payload = bytes(hdr) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    if path.suffix == ".gz":
        payload = gzip.compress(payload, compresslevel=_GZIP_LEVEL, mtime=0)
    path.write_bytes(payload)

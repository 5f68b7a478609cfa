"""Minimal NIfTI-1 reader/writer (.nii and .nii.gz).

Covers the subset this toolkit needs: single-file NIfTI-1 volumes with an
sform (or plain pixdim) affine and the common scalar dtypes. Data is
returned as a 3-D array in the file's native axis order together with the
4x4 voxel-to-world affine.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path):
    """Returns (data, affine): 3-D float array and 4x4 affine."""
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise ValueError(f"{path}: file too small to hold a NIfTI-1 header")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from(order + "i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(order + "i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise ValueError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")

    dim = struct.unpack_from(order + "8h", raw, 40)
    datatype, _bitpix = struct.unpack_from(order + "2h", raw, 70)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(order + "2f", raw, 112)
    _qform_code, sform_code = struct.unpack_from(order + "2h", raw, 252)
    srow = np.array([
        struct.unpack_from(order + "4f", raw, 280),
        struct.unpack_from(order + "4f", raw, 296),
        struct.unpack_from(order + "4f", raw, 312),
    ])

    ndim = dim[0]
    if ndim < 3:
        raise ValueError(f"{path}: expected a 3-D volume, header says {ndim}-D")
    shape = tuple(dim[1:4])
    if ndim > 3 and any(d > 1 for d in dim[4:1 + ndim]):
        raise ValueError(f"{path}: 4-D volumes are not supported")
    if datatype not in _DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
    count = int(np.prod(shape))
    start = int(vox_offset) if vox_offset else HEADER_SIZE + 4
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    data = flat.reshape(shape, order="F").astype(np.float64)
    if scl_slope not in (0.0, 1.0):
        data = data * scl_slope + scl_inter
    elif scl_inter not in (0.0,) and scl_slope == 1.0:
        data = data + scl_inter

    affine = np.eye(4)
    if sform_code > 0:
        affine[:3, :] = srow
    else:
        affine[0, 0], affine[1, 1], affine[2, 2] = pixdim[1], pixdim[2], pixdim[3]
    return data, affine


def write_nifti(path, data, affine, dtype=np.float32):
    """Writes a single-file NIfTI-1 volume with an sform affine."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"only 3-D volumes are written, got shape {data.shape}")
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise ValueError(f"unsupported output dtype {dtype}")
    affine = np.asarray(affine, dtype=np.float64)
    spacing = np.sqrt((affine[:3, :3] ** 2).sum(axis=0))

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _CODES[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform 0, sform 1
    struct.pack_into("<4f", hdr, 280, *affine[0, :])
    struct.pack_into("<4f", hdr, 296, *affine[1, :])
    struct.pack_into("<4f", hdr, 312, *affine[2, :])
    hdr[344:348] = MAGIC_SINGLE

    with _open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # no header extensions
        fh.write(np.asfortranarray(data.astype(dtype)).tobytes(order="F"))
    return path

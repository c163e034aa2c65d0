"""Minimal single-file NIfTI-1 reader/writer.

Supported subset: uncompressed .nii, little-endian, 3-D volumes, dtypes
uint8 / int16 / float32, no extensions, no intensity scaling (scl_slope
must be 0 or 1 with zero intercept). Anything else is rejected with a
diagnostic naming the problem rather than a generic failure.

Axis convention: arrays are indexed [D, H, W]. On disk the payload is the
C-order bytes of that array, which makes W the fastest-varying axis, so
the header records nx = W, ny = H, nz = D and pixdim follows the same
order (pixdim[1] = W spacing). External tools therefore see the same
volume with their usual x-fastest reading.

Header layout (348 bytes) follows the published nifti1.h field order; the
writer emits vox_offset 352 (header + 4 pad bytes) and magic ``n+1\\0``.
"""

import struct

import numpy as np

# datatype codes from nifti1.h
_DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
_CODE_FOR = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4,
             np.dtype(np.float32): 16}
_BITPIX = {2: 8, 4: 16, 16: 32}

_MAGIC = b"n+1\x00"
_HEADER_SIZE = 348
_VOX_OFFSET = 352.0

# One struct format for the whole 348-byte header, little-endian.
_HEADER_FMT = ("<i"      # sizeof_hdr
               "10s18si" # data_type, db_name, extents
               "hcc"     # session_error, regular, dim_info
               "8h"      # dim
               "3fh"     # intent_p1..p3, intent_code
               "hhh"     # datatype, bitpix, slice_start
               "8f"      # pixdim
               "fff"     # vox_offset, scl_slope, scl_inter
               "hcc"     # slice_end, slice_code, xyzt_units
               "ffff"    # cal_max, cal_min, slice_duration, toffset
               "ii"      # glmax, glmin
               "80s24s"  # descrip, aux_file
               "hh"      # qform_code, sform_code
               "6f"      # quatern_b..d, qoffset_x..z
               "12f"     # srow_x, srow_y, srow_z
               "16s4s")  # intent_name, magic
assert struct.calcsize(_HEADER_FMT) == _HEADER_SIZE


class NiftiError(ValueError):
    """A file outside the supported NIfTI-1 subset, with a reason."""


def write_volume(path, volume, spacing=(1.0, 1.0, 1.0)):
    """Write a 3-D array as an uncompressed NIfTI-1 file."""
    arr = np.asarray(volume)
    if arr.ndim != 3:
        raise NiftiError(f"only 3-D volumes are supported, got {arr.shape}")
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise NiftiError(
            f"unsupported dtype {arr.dtype}; supported: uint8, int16, float32")
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,) or not np.all(sp > 0):
        raise NiftiError(f"spacing must be 3 positive reals, got {spacing!r}")
    d, h, w = arr.shape
    dim = (3, w, h, d, 1, 1, 1, 1)
    pixdim = (1.0, float(sp[2]), float(sp[1]), float(sp[0]),
              0.0, 0.0, 0.0, 0.0)
    header = struct.pack(
        _HEADER_FMT,
        _HEADER_SIZE,
        b"", b"", 0,
        0, b"\x00", b"\x00",
        *dim,
        0.0, 0.0, 0.0, 0,
        code, _BITPIX[code], 0,
        *pixdim,
        _VOX_OFFSET, 1.0, 0.0,
        0, b"\x00", b"\x02",     # xyzt_units: millimetres
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"", b"",
        0, 0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *([0.0] * 12),
        b"", _MAGIC)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * int(_VOX_OFFSET - _HEADER_SIZE))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_volume(path):
    """Read a supported .nii file. Returns (array [D,H,W], spacing (d,h,w))."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER_SIZE:
        raise NiftiError(
            f"truncated file: {len(raw)} bytes is shorter than the "
            f"{_HEADER_SIZE}-byte header")
    fields = struct.unpack(_HEADER_FMT, raw[:_HEADER_SIZE])
    sizeof_hdr = fields[0]
    magic = fields[-1]
    if magic != _MAGIC:
        raise NiftiError(
            f"not a NIfTI-1 file: magic {magic!r} (expected {_MAGIC!r})")
    if sizeof_hdr != _HEADER_SIZE:
        if struct.unpack(">i", struct.pack("<i", sizeof_hdr))[0] == _HEADER_SIZE:
            raise NiftiError("big-endian NIfTI-1 files are not supported")
        raise NiftiError(f"bad header size {sizeof_hdr}, expected 348")

    dim = fields[7:15]
    if dim[0] != 3:
        raise NiftiError(f"only 3-D volumes are supported, header says "
                         f"{dim[0]}-D")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise NiftiError(f"non-positive dimensions {(nz, ny, nx)}")

    datatype = fields[19]
    if datatype not in _DTYPE_CODES:
        raise NiftiError(
            f"unsupported dtype code {datatype}; supported codes: "
            f"{sorted(_DTYPE_CODES)} (uint8, int16, float32)")
    dtype = np.dtype(_DTYPE_CODES[datatype]).newbyteorder("<")
    bitpix = fields[20]
    if bitpix != _BITPIX[datatype]:
        raise NiftiError(
            f"bitpix {bitpix} contradicts dtype code {datatype}")

    pixdim = fields[22:30]
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    if min(spacing) <= 0:
        raise NiftiError(f"non-positive pixdim spacing {spacing}")

    vox_offset = fields[30]
    slope, inter = fields[31], fields[32]
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise NiftiError(
            f"intensity scaling (scl_slope {slope}, scl_inter {inter}) "
            f"is not supported")
    offset = int(vox_offset)
    if offset < _HEADER_SIZE:
        raise NiftiError(f"vox_offset {vox_offset} points inside the header")

    n_bytes = nx * ny * nz * dtype.itemsize
    payload = raw[offset:offset + n_bytes]
    if len(payload) < n_bytes:
        raise NiftiError(
            f"truncated payload: expected {n_bytes} data bytes, "
            f"found {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx)
    return arr.astype(arr.dtype.newbyteorder("=")), spacing

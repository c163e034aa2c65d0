"""NIfTI-1 subset IO: round-trips, header fixture, diagnostics."""

import struct

import numpy as np
import pytest

from gcaseg.nifti import NiftiError, read_volume, write_volume


def _write_read(tmp_path, arr, spacing=(1.0, 1.0, 1.0)):
    path = tmp_path / "vol.nii"
    write_volume(path, arr, spacing)
    return read_volume(path)


def test_float32_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(3)
    arr = rng.standard_normal((16, 16, 16)).astype(np.float32)
    got, spacing = _write_read(tmp_path, arr, (1.0, 1.25, 0.5))
    assert got.dtype == np.float32
    assert got.tobytes() == arr.tobytes()
    assert spacing == (1.0, 1.25, 0.5)


def test_all_supported_dtypes_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    for arr in (rng.integers(0, 255, size=(4, 6, 5)).astype(np.uint8),
                rng.integers(-300, 300, size=(3, 7, 2)).astype(np.int16),
                rng.standard_normal((5, 4, 3)).astype(np.float32)):
        got, _ = _write_read(tmp_path, arr)
        assert got.dtype == arr.dtype
        assert np.array_equal(got, arr)
        assert got.shape == arr.shape


def test_anisotropic_spacing_round_trip(tmp_path):
    arr = np.zeros((2, 3, 4), dtype=np.uint8)
    _, spacing = _write_read(tmp_path, arr, (2.0, 0.5, 1.5))
    assert spacing == (2.0, 0.5, 1.5)


def test_writer_rejects_bad_inputs(tmp_path):
    path = tmp_path / "bad.nii"
    with pytest.raises(NiftiError, match="unsupported dtype"):
        write_volume(path, np.zeros((2, 2, 2), dtype=np.float64))
    with pytest.raises(NiftiError, match="3-D"):
        write_volume(path, np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(NiftiError, match="spacing"):
        write_volume(path, np.zeros((2, 2, 2), dtype=np.uint8),
                     spacing=(1.0, -1.0, 1.0))


def _hand_header(dim=(3, 5, 4, 3, 1, 1, 1, 1), datatype=2, bitpix=8,
                 vox_offset=352.0, magic=b"n+1\x00", slope=0.0):
    """Assemble header bytes field by field from the published layout."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<f", hdr, 112, slope)
    hdr[344:348] = magic
    return bytes(hdr)


def test_hand_assembled_header_reports_expected_shape(tmp_path):
    # nx=5, ny=4, nz=3 in the header -> array indexed [3, 4, 5]
    payload = np.arange(3 * 4 * 5, dtype=np.uint8)
    path = tmp_path / "hand.nii"
    path.write_bytes(_hand_header() + b"\x00" * 4 + payload.tobytes())
    arr, spacing = read_volume(path)
    assert arr.shape == (3, 4, 5)
    assert spacing == (1.0, 1.0, 1.0)
    assert np.array_equal(arr.reshape(-1), payload)
    # W is the fastest axis on disk
    assert arr[0, 0, 1] == 1 and arr[0, 1, 0] == 5 and arr[1, 0, 0] == 20


def test_bad_magic_diagnostic(tmp_path):
    path = tmp_path / "bad_magic.nii"
    path.write_bytes(_hand_header(magic=b"abc\x00") + b"\x00" * 64)
    with pytest.raises(NiftiError, match="not a NIfTI-1 file"):
        read_volume(path)


def test_unsupported_dtype_diagnostic(tmp_path):
    path = tmp_path / "f64.nii"
    # datatype 64 = float64, outside the subset
    path.write_bytes(_hand_header(datatype=64, bitpix=64)
                     + b"\x00" * 4 + b"\x00" * (60 * 8))
    with pytest.raises(NiftiError, match="unsupported dtype code 64"):
        read_volume(path)


def test_truncated_payload_diagnostic(tmp_path):
    path = tmp_path / "short.nii"
    path.write_bytes(_hand_header() + b"\x00" * 4 + b"\x00" * 10)
    with pytest.raises(NiftiError, match="truncated payload"):
        read_volume(path)


def test_truncated_header_diagnostic(tmp_path):
    path = tmp_path / "tiny.nii"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(NiftiError, match="truncated file"):
        read_volume(path)


def test_scaling_and_dimensionality_rejected(tmp_path):
    path = tmp_path / "scaled.nii"
    path.write_bytes(_hand_header(slope=2.5) + b"\x00" * 4 + b"\x00" * 60)
    with pytest.raises(NiftiError, match="intensity scaling"):
        read_volume(path)

    path4d = tmp_path / "vol4d.nii"
    path4d.write_bytes(_hand_header(dim=(4, 5, 4, 3, 2, 1, 1, 1))
                       + b"\x00" * 4 + b"\x00" * 120)
    with pytest.raises(NiftiError, match="only 3-D"):
        read_volume(path4d)


def test_big_endian_rejected(tmp_path):
    hdr = bytearray(_hand_header())
    struct.pack_into(">i", hdr, 0, 348)
    path = tmp_path / "be.nii"
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + b"\x00" * 60)
    with pytest.raises(NiftiError, match="big-endian"):
        read_volume(path)


def test_vox_offset_honored(tmp_path):
    # extra gap between header and payload is legal as long as it is declared
    payload = np.arange(60, dtype=np.uint8)
    path = tmp_path / "gap.nii"
    path.write_bytes(_hand_header(vox_offset=400.0)
                     + b"\x00" * (400 - 348) + payload.tobytes())
    arr, _ = read_volume(path)
    assert np.array_equal(arr.reshape(-1), payload)


def test_hundred_volume_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    for i in range(100):
        shape = tuple(int(s) for s in rng.integers(2, 9, size=3))
        dtype = (np.uint8, np.int16, np.float32)[i % 3]
        if dtype is np.float32:
            arr = rng.standard_normal(shape).astype(dtype)
        else:
            arr = rng.integers(0, 100, size=shape).astype(dtype)
        spacing = tuple(float(x) for x in rng.uniform(0.5, 3.0, size=3)
                        .astype(np.float32))
        path = tmp_path / f"v{i}.nii"
        write_volume(path, arr, spacing)
        got, sp = read_volume(path)
        assert got.tobytes() == arr.tobytes()
        assert sp == spacing

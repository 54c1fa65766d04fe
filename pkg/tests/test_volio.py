import gzip
import struct

import numpy as np
import pytest

from slicecast.errors import FormatError, IntegrityError, LabelDictionaryError
from slicecast.volio import (Frame, LabelVolume, Volume, load_labels,
                             load_volume, save_labels, save_raw, save_volume,
                             volume_to_frames)

DTYPES = {"u8": np.uint8, "i16": np.int16, "u16": np.uint16, "f32": np.float32}


def write_raw(path, arr, dtype_name):
    codes = {"u8": 0, "i16": 1, "u16": 2, "f32": 3}
    s, h, w = arr.shape
    payload = np.ascontiguousarray(
        arr.astype("<" + np.dtype(DTYPES[dtype_name]).str[1:])).tobytes()
    with open(path, "wb") as f:
        f.write(b"SCVL" + struct.pack("<3I", s, h, w)
                + bytes([codes[dtype_name]]) + payload)


def test_raw_single_voxel(tmp_path):
    path = tmp_path / "one.scvl"
    write_raw(path, np.array([[[7]]], dtype=np.uint8), "u8")
    v = load_volume(path)
    assert v.dims == (1, 1, 1)
    assert v.voxels[0, 0, 0] == 7
    assert v.source_dtype == "u8"


def test_raw_ramp_round_trip(tmp_path):
    # Oracle: the generator itself; voxel(k, j, i) = 6k + 2j + i.
    ramp = np.zeros((4, 3, 2), dtype=np.int16)
    for k in range(4):
        for j in range(3):
            for i in range(2):
                ramp[k, j, i] = 6 * k + 2 * j + i
    path = tmp_path / "ramp.scvl"
    write_raw(path, ramp, "i16")
    v = load_volume(path)
    assert v.voxels.dtype == np.int16
    np.testing.assert_array_equal(v.voxels, ramp)


@pytest.mark.parametrize("dtype_name", ["u8", "i16", "u16", "f32"])
def test_nifti_round_trip(tmp_path, dtype_name):
    rng = np.random.default_rng(7)
    arr = rng.integers(0, 200, size=(5, 4, 3)).astype(DTYPES[dtype_name])
    vol = Volume(voxels=arr, source_dtype=dtype_name,
                 spacing=(0.7, 0.36, 0.36))
    path = tmp_path / "v.nii"
    save_volume(vol, path)
    back = load_volume(path)
    np.testing.assert_array_equal(back.voxels, arr)
    assert back.source_dtype == dtype_name
    assert back.spacing == pytest.approx((0.7, 0.36, 0.36))


def test_nifti_gzip_identical(tmp_path):
    arr = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    vol = Volume(voxels=arr, source_dtype="i16")
    save_volume(vol, tmp_path / "v.nii")
    save_volume(vol, tmp_path / "v.nii.gz")
    plain = load_volume(tmp_path / "v.nii")
    zipped = load_volume(tmp_path / "v.nii.gz")
    np.testing.assert_array_equal(plain.voxels, zipped.voxels)
    assert (tmp_path / "v.nii.gz").read_bytes()[:2] == b"\x1f\x8b"


def test_raw_format_round_trip(tmp_path):
    arr = np.arange(60, dtype=np.float32).reshape(3, 4, 5)
    vol = Volume(voxels=arr, source_dtype="f32")
    save_raw(vol, tmp_path / "v.scvl")
    np.testing.assert_array_equal(load_volume(tmp_path / "v.scvl").voxels, arr)


def test_deterministic_reload(tmp_path):
    arr = np.random.default_rng(0).integers(0, 99, (4, 4, 4)).astype(np.uint8)
    save_volume(Volume(voxels=arr, source_dtype="u8"), tmp_path / "v.nii")
    a = load_volume(tmp_path / "v.nii")
    b = load_volume(tmp_path / "v.nii")
    np.testing.assert_array_equal(a.voxels, b.voxels)


def test_slice_axis_override(tmp_path):
    arr = np.arange(24, dtype=np.int16).reshape(2, 3, 4)  # (k, j, i)
    save_volume(Volume(voxels=arr, source_dtype="i16"), tmp_path / "v.nii")
    assert load_volume(tmp_path / "v.nii", slice_axis_override="k").dims == (2, 3, 4)
    assert load_volume(tmp_path / "v.nii", slice_axis_override="j").dims == (3, 2, 4)
    vi = load_volume(tmp_path / "v.nii", slice_axis_override="i")
    assert vi.dims == (4, 2, 3)
    np.testing.assert_array_equal(vi.voxels, np.moveaxis(arr, 2, 0))


def test_truncated_payload(tmp_path):
    arr = np.zeros((2, 2, 2), dtype=np.uint8)
    path = tmp_path / "v.nii"
    save_volume(Volume(voxels=arr, source_dtype="u8"), path)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(IntegrityError):
        load_volume(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"\x00" * 400)
    with pytest.raises(FormatError, match="sizeof_hdr"):
        load_volume(path)


def test_reject_4d(tmp_path):
    path = tmp_path / "v.nii"
    arr = np.zeros((2, 2, 2), dtype=np.uint8)
    save_volume(Volume(voxels=arr, source_dtype="u8"), path)
    data = bytearray(path.read_bytes())
    struct.pack_into("<h", data, 40, 4)  # dim[0]
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match=r"dim\[0\]"):
        load_volume(path)


def test_unsupported_datatype(tmp_path):
    path = tmp_path / "v.nii"
    save_volume(Volume(voxels=np.zeros((1, 1, 1), np.uint8),
                       source_dtype="u8"), path)
    data = bytearray(path.read_bytes())
    struct.pack_into("<h", data, 70, 64)  # float64, unsupported
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="datatype"):
        load_volume(path)


def test_scl_slope_applied(tmp_path):
    path = tmp_path / "v.nii"
    arr = np.array([[[1, 2], [3, 4]]], dtype=np.int16)
    save_volume(Volume(voxels=arr, source_dtype="i16"), path)
    data = bytearray(path.read_bytes())
    struct.pack_into("<2f", data, 112, 2.0, 1.0)  # slope, inter
    path.write_bytes(bytes(data))
    v = load_volume(path)
    np.testing.assert_allclose(v.voxels, arr * 2.0 + 1.0)


def test_labels_load_and_dictionary(tmp_path):
    labels = np.zeros((2, 2, 2), dtype=np.int32)
    labels[0, 0, 0] = 1
    labels[1, 1, 1] = 2
    path = tmp_path / "gt.nii"
    save_labels(LabelVolume(labels=labels,
                            label_names={1: "femur", 2: "tibia"}), path)
    lv = load_labels(path, {1: "femur", 2: "tibia"})
    assert lv.label_names == {1: "femur", 2: "tibia"}
    with pytest.raises(LabelDictionaryError):
        load_labels(path, {1: "femur"})


def test_labels_all_zero(tmp_path):
    path = tmp_path / "gt.nii"
    save_labels(LabelVolume(labels=np.zeros((2, 2, 2), np.int32)), path)
    lv = load_labels(path, {})
    assert not lv.labels.any()


def test_window_constant_volume():
    vol = Volume(voxels=np.full((3, 2, 2), 42, np.int16), source_dtype="i16")
    frames = volume_to_frames(vol)
    assert len(frames) == 3
    assert all(not f.pixels.any() for f in frames)


def test_window_minmax_arithmetic():
    # Oracle: direct arithmetic on the 4 sorted values under a (0, 100) window.
    vol = Volume(voxels=np.array([[[0, 100], [200, 300]]], np.float32),
                 source_dtype="f32")
    (frame,) = volume_to_frames(vol, window=(0, 100))
    np.testing.assert_array_equal(frame.pixels,
                                  np.array([[0, 85], [170, 255]], np.uint8))


def test_window_properties():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = int(rng.integers(1, 6))
        vol = Volume(voxels=rng.normal(0, 50, (s, 5, 5)).astype(np.float32),
                     source_dtype="f32")
        frames = volume_to_frames(vol)
        assert len(frames) == s
        for f in frames:
            assert f.pixels.dtype == np.uint8  # range [0, 255] by dtype


def test_window_validation():
    vol = Volume(voxels=np.zeros((1, 1, 1), np.uint8), source_dtype="u8")
    with pytest.raises(ValueError):
        volume_to_frames(vol, window=(50, 50))
    with pytest.raises(ValueError):
        volume_to_frames(vol, window=(-1, 99))


def test_frame_dims():
    f = Frame(slice_index=0, pixels=np.zeros((3, 5), np.uint8))
    assert (f.height, f.width) == (3, 5)

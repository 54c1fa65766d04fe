"""Volume and label ingestion, axis canonicalization, and frame extraction.

Canonical voxel order is (slice, row, col). For NIfTI-1 files the k-axis
(slowest varying on disk) becomes the slice axis by default, the i-axis
(fastest varying) becomes the column axis, so extracting a frame is a
contiguous plane read.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, GridError, IntegrityError, LabelDictionaryError

# NIfTI-1 datatype codes for the supported subset.
_NIFTI_DTYPES = {
    2: ("u8", np.uint8, 8),
    4: ("i16", np.int16, 16),
    512: ("u16", np.uint16, 16),
    16: ("f32", np.float32, 32),
}
_NIFTI_CODE_BY_NAME = {name: code for code, (name, _, _) in _NIFTI_DTYPES.items()}
_NP_BY_NAME = {name: np_dtype for _, (name, np_dtype, _) in _NIFTI_DTYPES.items()}

# Raw test format: b"SCVL" + u32 S,H,W (LE) form the 16-byte header,
# followed by a single u8 dtype code and the row-major payload.
_RAW_MAGIC = b"SCVL"
_RAW_DTYPE_CODES = {0: "u8", 1: "i16", 2: "u16", 3: "f32"}
_RAW_CODE_BY_NAME = {name: code for code, name in _RAW_DTYPE_CODES.items()}

DEFAULT_WINDOW = (0.5, 99.5)


@dataclass(frozen=True)
class Volume:
    """3D scalar intensities in canonical (slice, row, col) order."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] | None = None
    source_dtype: str = "f32"

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise FormatError(f"expected 3D voxels, got ndim={self.voxels.ndim}")
        if min(self.voxels.shape) < 1:
            raise FormatError(f"degenerate dims {self.voxels.shape}")
        if self.spacing is not None and any(s <= 0 for s in self.spacing):
            raise FormatError(f"non-positive spacing {self.spacing}")
        if self.source_dtype not in _NP_BY_NAME:
            raise FormatError(f"unsupported source_dtype {self.source_dtype!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelVolume:
    """Integer-labeled reference masks; label 0 is background."""

    labels: np.ndarray
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise FormatError(f"expected 3D labels, got ndim={self.labels.ndim}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise FormatError(f"labels must be integer, got {self.labels.dtype}")
        observed = set(int(v) for v in np.unique(self.labels)) - {0}
        missing = observed - set(self.label_names)
        if missing:
            raise LabelDictionaryError(
                f"labels {sorted(missing)} present in mask but absent from "
                f"label_names {sorted(self.label_names)}"
            )
        if observed and min(observed) < 0:
            raise FormatError("negative label values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def mask_for(self, object_id: int, slice_index: int | None = None) -> np.ndarray:
        """Binary mask of one structure, full volume or a single slice."""
        src = self.labels if slice_index is None else self.labels[slice_index]
        return src == object_id


@dataclass(frozen=True)
class Frame:
    """One 8-bit grayscale slice, the unit sent to backends."""

    slice_index: int
    pixels: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise FormatError("frame pixels must be 2D uint8")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_nifti(data: bytes):
    if len(data) < 348:
        raise IntegrityError(f"file too short for a NIfTI-1 header ({len(data)} bytes)")
    sizeof_hdr = struct.unpack_from("<i", data, 0)[0]
    if sizeof_hdr != 348:
        raise FormatError(f"sizeof_hdr={sizeof_hdr}, expected 348")
    magic = data[344:348]
    if magic != b"n+1\x00":
        raise FormatError(f"unsupported NIfTI magic {magic!r} (single-file n+1 only)")
    dim = struct.unpack_from("<8h", data, 40)
    if dim[0] != 3:
        raise FormatError(f"dim[0]={dim[0]}, only 3D volumes supported")
    ni, nj, nk = dim[1], dim[2], dim[3]
    if min(ni, nj, nk) < 1:
        raise FormatError(f"degenerate dims {(ni, nj, nk)}")
    datatype, bitpix = struct.unpack_from("<hh", data, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported datatype code {datatype}")
    name, np_dtype, expected_bits = _NIFTI_DTYPES[datatype]
    if bitpix != expected_bits:
        raise FormatError(f"bitpix={bitpix} inconsistent with datatype {name}")
    pixdim = struct.unpack_from("<8f", data, 76)
    vox_offset = int(struct.unpack_from("<f", data, 108)[0])
    scl_slope, scl_inter = struct.unpack_from("<2f", data, 112)
    n_vox = ni * nj * nk
    payload = data[vox_offset : vox_offset + n_vox * (expected_bits // 8)]
    if len(payload) < n_vox * (expected_bits // 8):
        raise IntegrityError(
            f"payload truncated: need {n_vox * (expected_bits // 8)} bytes, "
            f"have {len(payload)}"
        )
    # Disk order has i fastest; reshaping C-order as (k, j, i) lands directly
    # in canonical (slice, row, col).
    arr = np.frombuffer(payload, dtype=np.dtype(np_dtype).newbyteorder("<"))
    arr = arr.reshape(nk, nj, ni).astype(np_dtype)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        arr = (arr.astype(np.float32) * scl_slope + scl_inter).astype(np.float32)
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    if any(s <= 0 for s in spacing):
        spacing = None
    return arr, spacing, name


def _parse_raw(data: bytes):
    if len(data) < 17:
        raise IntegrityError("raw file too short for header")
    s, h, w = struct.unpack_from("<3I", data, 4)
    if min(s, h, w) < 1:
        raise FormatError(f"degenerate dims {(s, h, w)}")
    code = data[16]
    if code not in _RAW_DTYPE_CODES:
        raise FormatError(f"unsupported raw dtype code {code}")
    name = _RAW_DTYPE_CODES[code]
    np_dtype = _NP_BY_NAME[name]
    n_bytes = s * h * w * np.dtype(np_dtype).itemsize
    payload = data[17 : 17 + n_bytes]
    if len(payload) < n_bytes:
        raise IntegrityError(f"payload truncated: need {n_bytes}, have {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.dtype(np_dtype).newbyteorder("<"))
    return arr.reshape(s, h, w).astype(np_dtype), None, name


def _load_array(path, slice_axis_override=None):
    data = _read_bytes(path)
    if data[:4] == _RAW_MAGIC:
        arr, spacing, name = _parse_raw(data)
    else:
        arr, spacing, name = _parse_nifti(data)
    if slice_axis_override is not None:
        arr = _remap_slice_axis(arr, slice_axis_override)
        spacing = None
    return np.ascontiguousarray(arr), spacing, name


def _remap_slice_axis(arr: np.ndarray, axis) -> np.ndarray:
    """Re-map which canonical axis plays the slice role.

    Axes of the canonically loaded array correspond to NIfTI (k, j, i).
    ``axis`` selects the one to move to position 0; the remaining two keep
    their relative order as (row, col).
    """
    names = {"k": 0, "j": 1, "i": 2}
    if isinstance(axis, str):
        if axis not in names:
            raise FormatError(f"unknown slice axis {axis!r}, expected one of k/j/i")
        axis = names[axis]
    if axis not in (0, 1, 2):
        raise FormatError(f"slice axis override must be 0..2, got {axis}")
    return np.moveaxis(arr, axis, 0)


def load_volume(path, slice_axis_override=None) -> Volume:
    """Load a NIfTI-1 (.nii / .nii.gz) or raw SCVL volume into canonical order."""
    arr, spacing, name = _load_array(path, slice_axis_override)
    return Volume(voxels=arr, spacing=spacing, source_dtype=name)


def load_labels(path, label_names=None, reference: Volume | None = None,
                slice_axis_override=None) -> LabelVolume:
    """Load an integer label mask; names default to ``structure_<id>``."""
    arr, _, name = _load_array(path, slice_axis_override)
    if name == "f32":
        rounded = np.rint(arr)
        if not np.array_equal(rounded, arr):
            raise FormatError("float label volume contains non-integer values")
        arr = rounded.astype(np.int32)
    else:
        arr = arr.astype(np.int32)
    if arr.min() < 0:
        raise FormatError("label volume contains negative values")
    if reference is not None and reference.dims != arr.shape:
        raise GridError(f"label dims {arr.shape} do not match volume {reference.dims}")
    if label_names is None:
        label_names = {
            int(v): f"structure_{int(v)}" for v in np.unique(arr) if v != 0
        }
    return LabelVolume(labels=arr, label_names=dict(label_names))


def save_volume(vol: Volume, path) -> None:
    """Write a canonical volume as single-file NIfTI-1 (.nii, gzipped if .gz)."""
    _write_nifti(vol.voxels.astype(_NP_BY_NAME[vol.source_dtype]),
                 vol.source_dtype, vol.spacing, path)


def save_labels(lv: LabelVolume, path) -> None:
    max_label = int(lv.labels.max(initial=0))
    name = "u8" if max_label < 256 else "u16"
    _write_nifti(lv.labels.astype(_NP_BY_NAME[name]), name, None, path)


def _write_nifti(arr: np.ndarray, dtype_name: str, spacing, path) -> None:
    s, h, w = arr.shape
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, w, h, s, 1, 1, 1, 1)
    code = _NIFTI_CODE_BY_NAME[dtype_name]
    bits = np.dtype(_NP_BY_NAME[dtype_name]).itemsize * 8
    struct.pack_into("<hh", hdr, 70, code, bits)
    pd = [1.0] * 8
    if spacing is not None:
        pd[1], pd[2], pd[3] = spacing[2], spacing[1], spacing[0]
    struct.pack_into("<8f", hdr, 76, *pd)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 0.0, 0.0)  # scl_slope/inter unused
    hdr[344:348] = b"n+1\x00"
    payload = np.ascontiguousarray(arr.astype("<" + np.dtype(arr.dtype).str[1:]))
    body = bytes(hdr) + payload.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(body)


def save_raw(vol: Volume, path) -> None:
    """Write the in-house SCVL test format."""
    arr = vol.voxels.astype(_NP_BY_NAME[vol.source_dtype])
    s, h, w = arr.shape
    header = _RAW_MAGIC + struct.pack("<3I", s, h, w)
    body = bytes([_RAW_CODE_BY_NAME[vol.source_dtype]])
    payload = np.ascontiguousarray(arr.astype("<" + np.dtype(arr.dtype).str[1:]))
    with open(path, "wb") as f:
        f.write(header + body + payload.tobytes())


def volume_to_frames(vol: Volume, window=DEFAULT_WINDOW) -> list[Frame]:
    """Window intensities to [p_low, p_high] percentiles and emit uint8 frames.

    One global percentile pair per volume; constant volumes map to all-zero
    frames.
    """
    low, high = window
    if not (0 <= low < high <= 100):
        raise ValueError(f"invalid percentile window {window}")
    vox = vol.voxels.astype(np.float64)
    p_low, p_high = np.percentile(vox, [low, high])
    if p_high <= p_low:
        scaled = np.zeros(vol.dims, dtype=np.uint8)
    else:
        clipped = np.clip(vox, p_low, p_high)
        scaled = np.rint((clipped - p_low) / (p_high - p_low) * 255.0)
        scaled = scaled.astype(np.uint8)
    return [Frame(slice_index=i, pixels=scaled[i]) for i in range(vol.dims[0])]

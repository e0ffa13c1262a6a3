"""CT volumes, binary masks, NIfTI-1 I/O and lung-window preprocessing.

Arrays are indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``; on disk the
voxels are stored x-fastest as NIfTI requires. Orientation is not
resolved: the sform/qform affine is read and carried along, but only the
``pixdim`` spacing enters any computation.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Stream

HU_MIN = -1000.0
HU_MAX = 600.0

HEADER_SIZE = 348
_MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype (byte order applied at read time)
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(ValueError):
    """Raised for files that are not readable single-file NIfTI-1 3D images."""


def _frozen(a: np.ndarray) -> np.ndarray:
    view = a.view()
    view.flags.writeable = False
    return view


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(math.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be three positive finite values, got {spacing!r}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar field on an anisotropic voxel lattice (a CT scan or derived field)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    intensity_kind: str = "HU"
    affine: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if self.intensity_kind not in ("HU", "normalized"):
            raise ValueError(f"unknown intensity kind {self.intensity_kind!r}")
        if self.intensity_kind == "normalized" and data.size and (data.min() < 0 or data.max() > 1):
            raise ValueError("normalized volume has values outside [0, 1]")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True, eq=False)
class Mask3D:
    """Binary occupancy on a voxel lattice (airway ground truth, prediction or lung mask)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {data.shape}")
        if data.dtype != bool:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("mask values must be exactly 0 or 1")
            data = data.astype(bool)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel-index box ``lo..hi``."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"box lo {self.lo} exceeds hi {self.hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def fits(self, dims) -> bool:
        return all(0 <= l and h < d for l, h, d in zip(self.lo, self.hi, dims))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))


def check_same_lattice(*images, names=None) -> None:
    """Raise ValueError unless all images share dims and spacing."""
    first = images[0]
    for i, img in enumerate(images[1:], start=1):
        if img.dims != first.dims:
            what = f"{names[0]} vs {names[i]}" if names else "images"
            raise ValueError(f"dimension mismatch ({what}): {first.dims} vs {img.dims}")
        if not np.allclose(img.spacing, first.spacing, rtol=1e-6, atol=0):
            what = f"{names[0]} vs {names[i]}" if names else "images"
            raise ValueError(f"spacing mismatch ({what}): {first.spacing} vs {img.spacing}")


# ---------------------------------------------------------------- NIfTI-1


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"{path}: malformed gzip stream ({exc})") from None
    return raw


def _parse(raw: bytes, path):
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: malformed header (file shorter than {HEADER_SIZE} bytes)")
    endian = None
    for e in "<>":
        ndim = struct.unpack_from(e + "h", raw, 40)[0]
        if 1 <= ndim <= 7:
            endian = e
            break
    if endian is None:
        raise NiftiError(f"{path}: malformed header (dim[0] out of range)")
    if raw[344:348] != _MAGIC:
        raise NiftiError(f"{path}: malformed header (bad magic {raw[344:348]!r})")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(endian + "2h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", raw, 108)
    sform_code = struct.unpack_from(endian + "h", raw, 254)[0]
    srow = struct.unpack_from(endian + "12f", raw, 280)

    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise NiftiError(f"{path}: non-3D image (dim = {dim[: ndim + 1]})")
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise NiftiError(f"{path}: malformed header (dims {shape})")
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(endian)

    offset = int(vox_offset)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if offset < HEADER_SIZE or len(raw) < offset + nbytes:
        raise NiftiError(
            f"{path}: malformed file (needs {offset + nbytes} bytes, has {len(raw)})"
        )
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))

    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if sform_code > 0:
        affine = np.vstack([np.array(srow, dtype=np.float64).reshape(3, 4), [0, 0, 0, 1]])
    else:
        affine = np.diag([*spacing, 1.0])
    return data, spacing, slope, inter, affine


def load_volume(path) -> Volume3D:
    """Read a 3D NIfTI-1 file (.nii or .nii.gz) as a HU volume.

    ``scl_slope``/``scl_inter`` are applied when the slope is set and the
    pair is not the identity. Values are returned as float32 unless the
    file itself stores float64.
    """
    data, spacing, slope, inter, affine = _parse(_read_bytes(path), path)
    out_dtype = np.float64 if data.dtype == np.float64 else np.float32
    if slope != 0 and math.isfinite(slope) and math.isfinite(inter) and (slope, inter) != (1.0, 0.0):
        data = data.astype(np.float64) * slope + inter
    return Volume3D(data.astype(out_dtype), spacing, "HU", affine)


def load_mask(path) -> Mask3D:
    """Read a 3D NIfTI-1 file as a binary mask; any nonzero voxel is foreground."""
    data, spacing, _, _, affine = _parse(_read_bytes(path), path)
    return Mask3D(data != 0, spacing, affine)


def _header(shape, spacing, dtype: np.dtype, affine) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _CODES[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)
    if affine is None:
        affine = np.diag([*spacing, 1.0])
    struct.pack_into("<12f", hdr, 280, *np.asarray(affine, dtype=np.float64)[:3].ravel())
    hdr[344:348] = _MAGIC
    return bytes(hdr)


def save_nifti(img: Volume3D | Mask3D, path, dtype=None) -> Path:
    """Write ``img`` as little-endian NIfTI-1; gzip when the name ends in ``.gz``.

    Masks default to uint8, volumes to float32. Output is byte-deterministic
    (gzip mtime is zeroed).
    """
    path = Path(path)
    if dtype is None:
        dtype = np.uint8 if isinstance(img, Mask3D) else np.float32
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype.newbyteorder("=") not in _CODES:
        raise NiftiError(f"unsupported datatype {dtype}")
    data = np.asarray(img.data)
    if np.issubdtype(dtype, np.integer) and not np.issubdtype(data.dtype, np.bool_):
        data = np.rint(data)
    payload = np.ascontiguousarray(data.astype(dtype).ravel(order="F")).tobytes()
    blob = _header(img.dims, img.spacing, dtype.newbyteorder("="), img.affine) + b"\x00" * 4 + payload
    if path.name.endswith(".gz"):
        blob = gzip.compress(blob, compresslevel=6, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


def scan_id(path) -> str:
    """File stem without ``.nii`` / ``.nii.gz``."""
    name = Path(path).name
    for suffix in (".nii.gz", ".nii", ".gz"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(name).stem


# ---------------------------------------------------------- preprocessing


def clip_and_scale(vol: Volume3D, lo: float = HU_MIN, hi: float = HU_MAX) -> Volume3D:
    """Clamp HU values to ``[lo, hi]`` and map them linearly onto [0, 1]."""
    if vol.intensity_kind != "HU":
        raise ValueError("clip_and_scale expects a HU volume")
    if not lo < hi:
        raise ValueError(f"clip bounds must satisfy lo < hi, got {lo}, {hi}")
    dtype = vol.data.dtype if vol.data.dtype in (np.float32, np.float64) else np.float32
    data = (np.clip(vol.data.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return Volume3D(data.astype(dtype), vol.spacing, "normalized", vol.affine)


def lung_bounding_box(lung_mask: Mask3D, apex_pad: int = 0, superior: str = "+z") -> BoundingBox:
    """Tight box around the lung mask, extended by ``apex_pad`` slices towards the apex.

    ``superior`` names the stored axis direction that points to the head:
    ``"+z"`` (default) or ``"-z"``. The padded box is clamped to the volume.
    """
    if apex_pad < 0:
        raise ValueError("apex_pad must be non-negative")
    if superior not in ("+z", "-z"):
        raise ValueError("superior must be '+z' or '-z'")
    idx = np.argwhere(lung_mask.data)
    if idx.size == 0:
        raise ValueError("empty lung mask")
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    nz = lung_mask.dims[2]
    if superior == "+z":
        hi[2] = min(hi[2] + apex_pad, nz - 1)
    else:
        lo[2] = max(lo[2] - apex_pad, 0)
    return BoundingBox(tuple(lo), tuple(hi))


def crop(img, box: BoundingBox):
    """Sub-volume covered by ``box``; spacing is preserved."""
    if not box.fits(img.dims):
        raise ValueError(f"box {box.lo}..{box.hi} lies outside dims {img.dims}")
    data = np.array(img.data[box.slices()])
    if isinstance(img, Mask3D):
        return Mask3D(data, img.spacing, img.affine)
    return Volume3D(data, img.spacing, img.intensity_kind, img.affine)


def _pad_value(img) -> float:
    if isinstance(img, Mask3D):
        return 0
    return HU_MIN if img.intensity_kind == "HU" else 0.0


def pad_to(img, size):
    """Symmetrically pad ``img`` up to at least ``size`` with background.

    Background is 0 for masks and normalized volumes and -1000 HU for HU
    volumes. Returns the padded image and the per-axis leading pad.
    """
    before = []
    widths = []
    for n, p in zip(img.dims, size):
        extra = max(p - n, 0)
        before.append(extra // 2)
        widths.append((extra // 2, extra - extra // 2))
    if all(w == (0, 0) for w in widths):
        return img, (0, 0, 0)
    data = np.pad(np.asarray(img.data), widths, mode="constant", constant_values=_pad_value(img))
    if isinstance(img, Mask3D):
        return Mask3D(data, img.spacing, img.affine), tuple(before)
    return Volume3D(data, img.spacing, img.intensity_kind, img.affine), tuple(before)


def patch_origin(dims, size, seed: int) -> tuple[int, int, int]:
    """Uniform origin over the valid lattice ``[0, n - p]`` per axis, x then y then z."""
    stream = Stream.from_seed(seed, "patch")
    return tuple(stream.randbelow(n - p + 1) for n, p in zip(dims, size))


def random_patch(img, size=(256, 256, 256), seed: int = 0):
    """Seeded random crop of ``size`` voxels.

    Images smaller than ``size`` along an axis are first padded (see
    :func:`pad_to`); the returned box is expressed on the padded lattice,
    which equals the input lattice whenever no padding was needed. The same
    ``(size, seed)`` applied to a paired mask selects the same region.
    """
    size = tuple(int(s) for s in size)
    if any(s < 1 for s in size):
        raise ValueError("patch size must be positive")
    padded, _ = pad_to(img, size)
    origin = patch_origin(padded.dims, size, seed)
    box = BoundingBox(origin, tuple(o + s - 1 for o, s in zip(origin, size)))
    return crop(padded, box), box

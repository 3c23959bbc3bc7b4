"""Label volume ingestion: a small NIfTI-1 reader/writer plus geometry checks.

Only single-file NIfTI-1 (``n+1`` magic), optionally gzip-compressed, is
supported. Volumes are reoriented to the closest RAS+ index order on load so
that ground truth and predictions written by different tools line up; the
rotation/shear part of the affine is otherwise ignored.
"""

from __future__ import annotations

import gzip
import logging
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from popshift.errors import (
    GridMismatch,
    MalformedHeader,
    NonIntegerData,
    SpacingMismatch,
    UnknownLabel,
)

log = logging.getLogger(__name__)

CANONICAL_AXIS_ORDER = "RAS+"
SPACING_TOLERANCE_MM = 1e-4

HEADER_SIZE = 348
VOX_OFFSET = 352
GZIP_MAGIC = b"\x1f\x8b"

# NIfTI datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


@dataclass(frozen=True)
class LabelDictionary:
    """Mapping of integer label -> organ name. Label 0 is always background."""

    entries: Mapping[int, str]

    def __post_init__(self):
        entries = {int(k): str(v) for k, v in dict(self.entries).items()}
        if 0 in entries:
            raise ValueError("label 0 is reserved for background")
        if any(k < 0 for k in entries):
            raise ValueError("labels must be positive integers")
        names = list(entries.values())
        if len(set(names)) != len(names):
            raise ValueError(f"organ names must be unique: {names}")
        object.__setattr__(self, "entries", dict(sorted(entries.items())))

    @property
    def labels(self) -> list[int]:
        return list(self.entries)

    @property
    def organs(self) -> list[str]:
        return list(self.entries.values())

    def items(self):
        return self.entries.items()

    def allowed_values(self) -> set[int]:
        return {0, *self.entries}

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Immutable 3D integer label grid with voxel spacing in mm."""

    labels: np.ndarray
    spacing: tuple[float, float, float]
    subject_id: str = ""
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3:
            raise ValueError(f"label array must be 3D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise NonIntegerData(f"label array has dtype {arr.dtype}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def validate_labels(self, expected: LabelDictionary) -> None:
        check_labels(self.labels, expected, self.subject_id)


class ValidatedPair(NamedTuple):
    gt: LabelVolume
    pred: LabelVolume


def check_labels(labels: np.ndarray, expected: LabelDictionary, where: str = "") -> None:
    """Raise UnknownLabel if any voxel value is missing from ``expected``."""
    if labels.size == 0:
        return
    lo, hi = int(labels.min()), int(labels.max())
    allowed = expected.allowed_values()
    if lo >= 0 and hi < 1 << 20:
        lut = np.zeros(hi + 1, dtype=bool)
        lut[[v for v in allowed if v <= hi]] = True
        bad_mask = ~lut[labels]
        if not bad_mask.any():
            return
        bad = sorted(int(v) for v in np.unique(labels[bad_mask]))
    else:
        bad = sorted(int(v) for v in np.unique(labels) if int(v) not in allowed)
    if bad:
        raise UnknownLabel(
            f"{where or 'volume'}: label values {bad} not in dictionary {sorted(allowed)}"
        )


def _compact(arr: np.ndarray) -> np.ndarray:
    hi = int(arr.max()) if arr.size else 0
    for dt in (np.uint8, np.uint16, np.uint32):
        if hi <= np.iinfo(dt).max:
            return arr.astype(dt, copy=False)
    return arr.astype(np.int64, copy=False)


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise MalformedHeader(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_header(raw: bytes, path) -> dict:
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"{path}: file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise MalformedHeader(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise MalformedHeader(f"{path}: bad magic {magic!r}, expected single-file 'n+1'")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if not 3 <= ndim <= 7:
        raise MalformedHeader(f"{path}: dim[0]={ndim}, expected a 3D volume")
    shape = dim[1:4]
    if any(d < 1 for d in shape) or any(d != 1 for d in dim[4 : ndim + 1]):
        raise MalformedHeader(f"{path}: invalid dims {dim[1:ndim + 1]}")

    datatype, bitpix = struct.unpack_from(endian + "2h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", raw, 108)
    qform_code, sform_code = struct.unpack_from(endian + "2h", raw, 252)
    quatern = struct.unpack_from(endian + "6f", raw, 256)
    srow = np.array(struct.unpack_from(endian + "12f", raw, 280), dtype=float).reshape(3, 4)

    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if not all(s > 0 and math.isfinite(s) for s in spacing):
        raise MalformedHeader(f"{path}: non-positive pixdim {pixdim[1:4]}")
    if datatype not in _DTYPES:
        raise NonIntegerData(f"{path}: unsupported NIfTI datatype code {datatype}")
    if vox_offset < HEADER_SIZE:
        raise MalformedHeader(f"{path}: vox_offset {vox_offset} inside header")
    return {
        "endian": endian,
        "shape": tuple(int(d) for d in shape),
        "dtype": np.dtype(_DTYPES[datatype]).newbyteorder(endian),
        "spacing": spacing,
        "pixdim": pixdim,
        "vox_offset": int(vox_offset),
        "scl_slope": float(scl_slope),
        "scl_inter": float(scl_inter),
        "qform_code": qform_code,
        "sform_code": sform_code,
        "quatern": quatern,
        "srow": srow,
    }


def _linear_part(hdr: dict) -> np.ndarray:
    """3x3 voxel->world direction matrix from sform, qform, or pixdim."""
    if hdr["sform_code"] > 0:
        return hdr["srow"][:, :3]
    if hdr["qform_code"] > 0:
        b, c, d = (float(v) for v in hdr["quatern"][:3])
        a = math.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ]
        )
        qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
        return rot * np.array([*hdr["spacing"][:2], hdr["spacing"][2] * qfac])
    return np.diag(hdr["spacing"])


def _orientation(linear: np.ndarray, path) -> tuple[list[int], list[int]]:
    """For each voxel axis: (world axis it runs along, +1/-1 direction)."""
    norms = np.linalg.norm(linear, axis=0)
    if np.any(norms == 0):
        warnings.warn(f"{path}: degenerate affine, keeping stored axis order", stacklevel=3)
        return [0, 1, 2], [1, 1, 1]
    unit = linear / norms
    world = [int(np.argmax(np.abs(unit[:, j]))) for j in range(3)]
    if sorted(world) != [0, 1, 2]:
        warnings.warn(f"{path}: ambiguous affine, keeping stored axis order", stacklevel=3)
        return [0, 1, 2], [1, 1, 1]
    off = unit.copy()
    for j, w in enumerate(world):
        off[w, j] = 0.0
    if np.abs(off).max() > 1e-4:
        warnings.warn(
            f"{path}: affine is not axis-aligned; rotation/shear ignored for metrics",
            stacklevel=3,
        )
    signs = [1 if unit[world[j], j] > 0 else -1 for j in range(3)]
    return world, signs


def load_label_volume(
    path: str | os.PathLike,
    expected_dict: LabelDictionary | None,
    subject_id: str | None = None,
) -> LabelVolume:
    """Read a NIfTI-1 label file and return it in canonical RAS+ index order.

    Raises FileNotFoundError, MalformedHeader, NonIntegerData or UnknownLabel.
    Pass ``expected_dict=None`` to skip label validation.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such label file: {path}")
    raw = _read_bytes(path)
    hdr = _parse_header(raw, path)

    n = int(np.prod(hdr["shape"]))
    nbytes = n * hdr["dtype"].itemsize
    if len(raw) < hdr["vox_offset"] + nbytes:
        raise MalformedHeader(f"{path}: truncated image data")
    data = np.frombuffer(raw, dtype=hdr["dtype"], count=n, offset=hdr["vox_offset"])
    data = data.reshape(hdr["shape"], order="F")

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * slope + inter

    if not np.issubdtype(data.dtype, np.integer):
        if not np.all(np.isfinite(data)) or not np.all(data == np.round(data)):
            raise NonIntegerData(f"{path}: label data contains non-integer values")
        data = data.astype(np.int64)
    if data.size and int(data.min()) < 0:
        bad = sorted(int(v) for v in np.unique(data[data < 0]))
        raise UnknownLabel(f"{path}: negative label values {bad}")

    world, signs = _orientation(_linear_part(hdr), path)
    for axis, sign in enumerate(signs):
        if sign < 0:
            data = np.flip(data, axis=axis)
    order = [world.index(w) for w in range(3)]
    data = np.ascontiguousarray(np.transpose(data, order))
    spacing = tuple(hdr["spacing"][j] for j in order)
    labels = _compact(data.astype(data.dtype.newbyteorder("="), copy=False))

    if subject_id is None:
        subject_id = path.name
        for suffix in (".nii.gz", ".nii"):
            if subject_id.endswith(suffix):
                subject_id = subject_id[: -len(suffix)]
    if expected_dict is not None:
        check_labels(labels, expected_dict, str(path))
    labels.setflags(write=False)
    return LabelVolume(
        labels,
        spacing,
        subject_id,
        meta={"source": str(path), "axis_order": CANONICAL_AXIS_ORDER},
    )


def save_label_volume(vol: LabelVolume, path: str | os.PathLike) -> Path:
    """Write ``vol`` as NIfTI-1 with a diagonal (canonical) affine.

    Gzip-compressed when the name ends in ``.gz``; output is byte-stable for a
    given volume (gzip mtime pinned to 0).
    """
    path = Path(path)
    data = _compact(vol.labels)
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _CODES[data.dtype], data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 1)
    sx, sy, sz = vol.spacing
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0)
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + data.astype(data.dtype.newbyteorder("<")).tobytes(order="F")
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return path


def validate_pair(gt: LabelVolume, pred: LabelVolume) -> ValidatedPair:
    """Check that two volumes share one grid; spacing must agree within 1e-4 mm."""
    if gt.dims != pred.dims:
        raise GridMismatch(f"{gt.subject_id}: dims {gt.dims} vs {pred.dims}")
    for axis, (a, b) in enumerate(zip(gt.spacing, pred.spacing)):
        # rounding keeps the 1e-4 boundary itself on the mismatch side
        if round(abs(a - b), 9) >= SPACING_TOLERANCE_MM:
            raise SpacingMismatch(
                f"{gt.subject_id}: spacing {gt.spacing} vs {pred.spacing} (axis {axis})"
            )
    return ValidatedPair(gt, pred)

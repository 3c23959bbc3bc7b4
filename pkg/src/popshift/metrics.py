"""Per-organ Dice, HD95 and volume for a ground-truth / prediction pair.

Conventions (recorded in every report through :data:`CONVENTIONS`):

* surface = foreground voxels with a 6-connected face neighbour that is
  background or outside the grid; each point sits at the voxel centre, in mm;
* HD95 = max of the two directed nearest-rank 95th percentiles;
* undefined values are NaN and carried in a ``flags`` column, never averaged.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from popshift.edt import squared_edt
from popshift.errors import EmptyMask, MissingColumn
from popshift.volume_io import LabelDictionary, LabelVolume, validate_pair

CONVENTIONS = {
    "surface": "6-connected boundary voxels, voxel centres in mm",
    "percentile": "nearest-rank ceil(0.95*n), symmetric max of directed percentiles",
    "distance": "euclidean mm",
    "volume_unit": "mL",
}

CASE_COLUMNS = [
    "subject_id",
    "model_id",
    "organ",
    "dice",
    "hd95_mm",
    "gt_volume_ml",
    "pred_volume_ml",
    "flags",
]

FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class SurfacePointSet:
    points: np.ndarray  # (n, 3) coordinates in mm
    voxels: np.ndarray  # (n, 3) integer indices

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class OrganMetrics:
    dice: float
    hd95_mm: float
    gt_volume_ml: float
    pred_volume_ml: float

    @property
    def flags(self) -> list[str]:
        out = []
        if math.isnan(self.dice):
            out.append("dice_undefined")
        if math.isnan(self.hd95_mm):
            out.append("hd95_undefined")
        return out


@dataclass(frozen=True)
class CaseMetrics:
    subject_id: str
    model_id: str
    per_organ: dict[str, OrganMetrics] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {
                "subject_id": self.subject_id,
                "model_id": self.model_id,
                "organ": organ,
                "dice": m.dice,
                "hd95_mm": m.hd95_mm,
                "gt_volume_ml": m.gt_volume_ml,
                "pred_volume_ml": m.pred_volume_ml,
                "flags": ";".join(m.flags),
            }
            for organ, m in self.per_organ.items()
        ]


def dice(gt: np.ndarray, pred: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); NaN when both masks are empty."""
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    total = int(np.count_nonzero(gt)) + int(np.count_nonzero(pred))
    if total == 0:
        return math.nan
    return 2 * int(np.count_nonzero(gt & pred)) / total


def surface_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, FACE_STRUCTURE, border_value=0)


def extract_surface(mask: np.ndarray, spacing: Sequence[float]) -> SurfacePointSet:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("cannot extract the surface of an empty mask")
    voxels = np.argwhere(surface_mask(mask))
    return SurfacePointSet(voxels * np.asarray(spacing, dtype=float), voxels)


def nearest_rank(values: np.ndarray, pct: int = 95) -> float:
    """Value at 1-based rank ceil(pct/100 * n) of the sorted sample."""
    n = len(values)
    rank = -(-pct * n // 100)
    return float(np.partition(values, rank - 1)[rank - 1])


def _bbox(mask: np.ndarray):
    sl = ndimage.find_objects(mask.astype(np.uint8, copy=False))
    return sl[0] if sl else None


def _union(a, b):
    return tuple(slice(min(x.start, y.start), max(x.stop, y.stop)) for x, y in zip(a, b))


def _foreground_box(labels: np.ndarray):
    # axis projections are far cheaper than a labelled scan of the full grid
    plane = labels.any(axis=2)
    rows = np.flatnonzero(plane.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(plane.any(axis=0))
    deep = np.flatnonzero(labels[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].any(axis=(0, 1)))
    return (
        slice(int(rows[0]), int(rows[-1]) + 1),
        slice(int(cols[0]), int(cols[-1]) + 1),
        slice(int(deep[0]), int(deep[-1]) + 1),
    )


def _label_boxes(labels: np.ndarray, max_label: int) -> list:
    """Bounding box per label 1..max_label (None when absent), in full-grid coordinates."""
    fg = _foreground_box(labels)
    if fg is None:
        return [None] * max_label
    boxes = ndimage.find_objects(labels[fg], max_label=max_label)
    boxes += [None] * (max_label - len(boxes))
    return [
        None if b is None else tuple(slice(o.start + s.start, o.start + s.stop) for o, s in zip(fg, b))
        for b in boxes
    ]


def directed_distances(
    src_surface: np.ndarray, dst_surface: np.ndarray, spacing: Sequence[float]
) -> np.ndarray:
    """Distance (mm) from every ``src_surface`` voxel to the nearest ``dst_surface`` voxel."""
    return np.sqrt(squared_edt(dst_surface, spacing)[src_surface])


def _hd95_cropped(gt: np.ndarray, pred: np.ndarray, spacing) -> float:
    gt_surf = surface_mask(gt)
    pred_surf = surface_mask(pred)
    d_gt = directed_distances(gt_surf, pred_surf, spacing)
    d_pred = directed_distances(pred_surf, gt_surf, spacing)
    return max(nearest_rank(d_gt), nearest_rank(d_pred))


def hd95(gt: np.ndarray, pred: np.ndarray, spacing: Sequence[float]) -> float:
    """Symmetric 95th-percentile Hausdorff distance in mm.

    Distances come from an exact Euclidean distance transform restricted to the
    bounding box of both masks, which contains every surface point of either.
    """
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    box_gt, box_pred = _bbox(gt), _bbox(pred)
    if box_gt is None or box_pred is None:
        raise EmptyMask("hd95 needs two non-empty masks")
    box = _union(box_gt, box_pred)
    return _hd95_cropped(gt[box], pred[box], tuple(float(s) for s in spacing))


def organ_volume(mask: np.ndarray, spacing: Sequence[float]) -> float:
    """Foreground volume in mL."""
    sx, sy, sz = (float(s) for s in spacing)
    return int(np.count_nonzero(mask)) * (sx * sy * sz) / 1000.0


def evaluate_case(
    gt: LabelVolume,
    pred: LabelVolume,
    label_dict: LabelDictionary,
    model_id: str = "",
) -> CaseMetrics:
    """Dice, HD95 and both volumes for every organ in ``label_dict``.

    Each organ is processed inside the union of its ground-truth and predicted
    bounding boxes so cost scales with organ size, not grid size.
    """
    gt, pred = validate_pair(gt, pred)
    spacing = gt.spacing
    voxel_mm3 = gt.voxel_volume_mm3
    max_label = max(label_dict.labels)
    boxes_gt = _label_boxes(gt.labels, max_label)
    boxes_pred = _label_boxes(pred.labels, max_label)

    per_organ = {}
    for label, organ in label_dict.items():
        bg, bp = boxes_gt[label - 1], boxes_pred[label - 1]
        if bg is None and bp is None:
            per_organ[organ] = OrganMetrics(math.nan, math.nan, 0.0, 0.0)
            continue
        box = _union(bg, bp) if bg is not None and bp is not None else (bg or bp)
        g = gt.labels[box] == label
        p = pred.labels[box] == label
        n_g, n_p = int(np.count_nonzero(g)), int(np.count_nonzero(p))
        dsc = 2 * int(np.count_nonzero(g & p)) / (n_g + n_p)
        dist = _hd95_cropped(g, p, spacing) if n_g and n_p else math.nan
        per_organ[organ] = OrganMetrics(dsc, dist, n_g * voxel_mm3 / 1000.0, n_p * voxel_mm3 / 1000.0)
    return CaseMetrics(gt.subject_id, model_id, per_organ)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def write_case_metrics(cases: Iterable[CaseMetrics], path: str | os.PathLike) -> Path:
    """One row per (subject, organ); rows sorted by subject, model, organ order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cases = sorted(cases, key=lambda c: (c.subject_id, c.model_id))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CASE_COLUMNS)
        for case in cases:
            for row in case.rows():
                writer.writerow([_fmt(row[c]) for c in CASE_COLUMNS])
    return path


def _num(s: str) -> float:
    return math.nan if s.strip() in ("", "nan", "NaN") else float(s)


def read_case_metrics(path: str | os.PathLike) -> list[CaseMetrics]:
    cases: dict[tuple[str, str], dict[str, OrganMetrics]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        missing = set(CASE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise MissingColumn(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            key = (row["subject_id"], row["model_id"])
            cases.setdefault(key, {})[row["organ"]] = OrganMetrics(
                _num(row["dice"]),
                _num(row["hd95_mm"]),
                _num(row["gt_volume_ml"]),
                _num(row["pred_volume_ml"]),
            )
    return [CaseMetrics(s, m, organs) for (s, m), organs in cases.items()]

"""Synthetic ellipsoid phantoms, controlled prediction perturbations, and
brute-force metric oracles.

The oracles deliberately share no code with :mod:`popshift.metrics`: surfaces
are found by explicit neighbour shifts and distances by all-pairs search.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from popshift.errors import EmptyMask, IoFailure, OutOfBounds
from popshift.volume_io import LabelDictionary, LabelVolume, save_label_volume

_FACE = ndimage.generate_binary_structure(3, 1)


# ---------------------------------------------------------------------------
# single phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    label: int
    center: tuple[float, float, float]  # voxel coordinates
    semi_axes: tuple[float, float, float]  # voxels


@dataclass(frozen=True)
class PhantomSpec:
    """Where ellipsoids overlap, the higher label wins."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    organs: tuple[Ellipsoid, ...]
    seed: int = 0
    subject_id: str = "phantom"

    def __post_init__(self):
        labels = [o.label for o in self.organs]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate organ labels {labels}")
        if any(lab <= 0 for lab in labels):
            raise ValueError("organ labels must be positive")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")


def ellipsoid_mask(dims: Sequence[int], center, semi_axes) -> np.ndarray:
    """Voxels whose centre lies inside the ellipsoid (boundary inclusive)."""
    mask = np.zeros(tuple(dims), dtype=bool)
    lo = [max(0, int(math.floor(c - a))) for c, a in zip(center, semi_axes)]
    hi = [min(d, int(math.ceil(c + a)) + 1) for d, c, a in zip(dims, center, semi_axes)]
    if any(h <= l for l, h in zip(lo, hi)):
        return mask
    grids = np.ogrid[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    mask[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = r <= 1.0
    return mask


def generate_volume(spec: PhantomSpec) -> LabelVolume:
    labels = np.zeros(spec.dims, dtype=np.uint8 if max((o.label for o in spec.organs), default=0) < 256 else np.uint16)
    for organ in sorted(spec.organs, key=lambda o: o.label):
        for axis, (c, a, d) in enumerate(zip(organ.center, organ.semi_axes, spec.dims)):
            if a <= 0 or c - a < -0.5 or c + a > d - 0.5:
                raise OutOfBounds(
                    f"organ {organ.label} extends past axis {axis} (centre {c}, semi-axis {a}, dim {d})"
                )
        labels[ellipsoid_mask(spec.dims, organ.center, organ.semi_axes)] = organ.label
    return LabelVolume(labels, spec.spacing, spec.subject_id)


def perturb(
    vol: LabelVolume,
    op: str,
    magnitude: int | Sequence[int],
    label: int,
    seed: int | None = None,
) -> LabelVolume:
    """Dilate, erode or translate one label; every other label is left untouched.

    Dilation only grows into background. Erosion treats voxels outside the grid
    as background. ``translate`` takes a 3-vector offset, or a scalar step whose
    axis and sign are drawn from ``seed``; moved voxels never overwrite other
    organs.
    """
    labels = np.array(vol.labels)
    mask = labels == label
    if op == "none":
        return vol
    if op == "translate":
        if np.ndim(magnitude) == 0:
            rng = np.random.default_rng(seed)
            offset = [0, 0, 0]
            offset[int(rng.integers(3))] = int(magnitude) * (1 if rng.random() < 0.5 else -1)
        else:
            offset = [int(m) for m in magnitude]
        if not mask.any() or not any(offset):
            return vol
        idx = np.argwhere(mask) + np.array(offset)
        if (idx < 0).any() or (idx >= np.array(labels.shape)).any():
            raise OutOfBounds(f"translation {offset} moves label {label} off the grid")
        labels[mask] = 0
        target = tuple(idx.T)
        free = labels[target] == 0
        labels[tuple(idx[free].T)] = label
        return LabelVolume(labels, vol.spacing, vol.subject_id)

    steps = int(magnitude)
    if steps < 0:
        raise ValueError("magnitude must be >= 0")
    if op == "dilate":
        background = labels == 0
        for _ in range(steps):
            mask = mask | (ndimage.binary_dilation(mask, _FACE) & background)
        labels[mask] = label
    elif op == "erode":
        eroded = ndimage.binary_erosion(mask, _FACE, iterations=steps, border_value=0) if steps else mask
        labels[mask & ~eroded] = 0
    else:
        raise ValueError(f"unknown perturbation {op!r}")
    return LabelVolume(labels, vol.spacing, vol.subject_id)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def brute_force_surface(mask: np.ndarray) -> np.ndarray:
    """Indices of foreground voxels with a face neighbour that is background or off-grid."""
    m = np.asarray(mask).astype(bool)
    padded = np.zeros(tuple(s + 2 for s in m.shape), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = m
    core = (slice(1, -1),) * 3
    exposed = np.zeros(m.shape, dtype=bool)
    for axis in range(3):
        for step in (-1, 1):
            nb = list(core)
            nb[axis] = slice(1 + step, padded.shape[axis] - 1 + step)
            exposed |= ~padded[tuple(nb)]
    return np.argwhere(m & exposed)


def _all_pairs_min(src: np.ndarray, dst: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(src))
    for i in range(0, len(src), chunk):
        diff = src[i : i + chunk, None, :] - dst[None, :, :]
        out[i : i + chunk] = np.sqrt((diff * diff).sum(axis=2)).min(axis=1)
    return out


def _rank95(values: np.ndarray) -> float:
    ordered = np.sort(values)
    return float(ordered[(95 * len(ordered) + 99) // 100 - 1])


def brute_force_hd95(gt: np.ndarray, pred: np.ndarray, spacing: Sequence[float]) -> float:
    """All-pairs surface distances, nearest-rank 95th percentile, symmetric max."""
    a = brute_force_surface(gt)
    b = brute_force_surface(pred)
    if len(a) == 0 or len(b) == 0:
        raise EmptyMask("brute_force_hd95 needs two non-empty masks")
    sp = np.asarray(spacing, dtype=float)
    pa, pb = a * sp, b * sp
    return max(_rank95(_all_pairs_min(pa, pb)), _rank95(_all_pairs_min(pb, pa)))


def brute_force_dice_exact(gt: np.ndarray, pred: np.ndarray) -> Fraction:
    a = set(np.flatnonzero(np.asarray(gt).astype(bool)).tolist())
    b = set(np.flatnonzero(np.asarray(pred).astype(bool)).tolist())
    if not a and not b:
        raise EmptyMask("dice is undefined for two empty masks")
    return Fraction(2 * len(a & b), len(a) + len(b))


def brute_force_dice(gt: np.ndarray, pred: np.ndarray) -> float:
    return float(brute_force_dice_exact(gt, pred))


# ---------------------------------------------------------------------------
# synthetic cohorts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OrganSite:
    label: int
    name: str
    center: tuple[float, float, float]


@dataclass(frozen=True)
class SizeDist:
    mean: tuple[float, float, float]  # semi-axes, voxels
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError("size distribution std must be positive")


@dataclass(frozen=True)
class Perturbation:
    op: str = "none"
    magnitude: int = 0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("perturbation magnitude must be >= 0")
        if self.op not in ("none", "dilate", "erode", "translate"):
            raise ValueError(f"unknown perturbation {self.op!r}")


@dataclass(frozen=True)
class SubgroupSpec:
    role: str
    sex: str | None  # None: drawn at random
    age_range: tuple[int, int]  # inclusive
    dataset: str
    organ_sizes: dict[int, SizeDist]


@dataclass(frozen=True)
class SyntheticCohortSpec:
    """A two-subgroup cohort whose pseudo-segmenters have a known quality gap.

    ``perturbations`` maps (train_role, test_role) to the operation applied to
    every organ of the ground truth to produce that model's prediction.
    """

    subgroups: tuple[SubgroupSpec, ...]
    organs: tuple[OrganSite, ...]
    n_subjects: int = 20
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    perturbations: dict[tuple[str, str], Perturbation] = field(default_factory=dict)
    n_folds: int = 1
    seed: int = 0

    @property
    def label_dict(self) -> LabelDictionary:
        return LabelDictionary({o.label: o.name for o in self.organs})

    def perturbation(self, train_role: str, test_role: str) -> Perturbation:
        return self.perturbations.get((train_role, test_role), Perturbation())


def default_cohort_spec(
    n_subjects: int = 20,
    grid: int = 48,
    spacing: float = 1.0,
    cross: Perturbation = Perturbation("erode", 1),
    matched: Perturbation = Perturbation(),
    n_folds: int = 1,
    seed: int = 0,
    dataset: str = "SYN",
    g1_std_scale: float = 1.0,
) -> SyntheticCohortSpec:
    """Female (g1) vs male (g2) cohort with two kidney-like organs.

    Cross-trained models get ``cross`` applied, matched models ``matched``.
    """
    c = grid / 2.0 - 0.5
    organs = (
        OrganSite(1, "right kidney", (c - grid * 0.22, c, c)),
        OrganSite(2, "left kidney", (c + grid * 0.22, c, c)),
    )
    base = grid / 8.0
    sizes_g1 = {
        o.label: SizeDist((base * 0.95, base * 0.9, base * 1.3), tuple(g1_std_scale * base * 0.08 for _ in range(3)))
        for o in organs
    }
    sizes_g2 = {
        o.label: SizeDist((base * 1.05, base, base * 1.45), tuple(base * 0.08 for _ in range(3)))
        for o in organs
    }
    roles = ("g1", "g2")
    return SyntheticCohortSpec(
        subgroups=(
            SubgroupSpec("g1", "female", (20, 90), dataset, sizes_g1),
            SubgroupSpec("g2", "male", (20, 90), dataset, sizes_g2),
        ),
        organs=organs,
        n_subjects=n_subjects,
        dims=(grid, grid, grid),
        spacing=(spacing, spacing, spacing),
        perturbations={
            (tr, te): (matched if tr == te else cross) for tr in roles for te in roles
        },
        n_folds=n_folds,
        seed=seed,
    )


def _sample_subject(spec: SyntheticCohortSpec, g_index: int, i: int) -> tuple[dict, PhantomSpec]:
    group = spec.subgroups[g_index]
    rng = np.random.default_rng([spec.seed, g_index, i])
    sex = group.sex or ("female" if rng.random() < 0.5 else "male")
    age = int(rng.integers(group.age_range[0], group.age_range[1] + 1))
    subject_id = f"{group.dataset}_{group.role}_{i:03d}"
    ellipsoids = []
    for site in spec.organs:
        dist = group.organ_sizes[site.label]
        limit = [min(c + 0.5, d - 0.5 - c) for c, d in zip(site.center, spec.dims)]
        axes = tuple(
            float(np.clip(rng.normal(m, s), 1.5, lim)) for m, s, lim in zip(dist.mean, dist.std, limit)
        )
        ellipsoids.append(Ellipsoid(site.label, site.center, axes))
    record = {"subject_id": subject_id, "sex": sex, "age": age, "dataset": group.dataset, "role": group.role}
    return record, PhantomSpec(spec.dims, spec.spacing, tuple(ellipsoids), spec.seed, subject_id)


def prediction_path(root: str | os.PathLike, model_role: str, fold: int, subject_id: str) -> Path:
    return Path(root) / model_role / f"fold{fold}" / f"{subject_id}.nii.gz"


def synth_cohort(spec: SyntheticCohortSpec, out_dir: str | os.PathLike) -> Path:
    """Write ground truth, per-model/fold predictions and ``registry.csv``.

    Layout::

        out_dir/registry.csv
        out_dir/gt/<subject>.nii.gz
        out_dir/predictions/<train_role>/fold<k>/<subject>.nii.gz
        out_dir/synth.json

    Returns the registry path. Output is byte-identical for a fixed spec.
    """
    out = Path(out_dir)
    roles = [g.role for g in spec.subgroups]
    rows = []
    try:
        for g_index, group in enumerate(spec.subgroups):
            for i in range(spec.n_subjects):
                record, pspec = _sample_subject(spec, g_index, i)
                gt = generate_volume(pspec)
                gt_rel = Path("gt") / f"{pspec.subject_id}.nii.gz"
                save_label_volume(gt, out / gt_rel)
                pred_rels = []
                for model in roles:
                    pert = spec.perturbation(model, group.role)
                    pred = gt
                    for site in spec.organs:
                        pred = perturb(pred, pert.op, pert.magnitude, site.label, seed=spec.seed + i)
                    for fold in range(spec.n_folds):
                        rel = prediction_path("predictions", model, fold, pspec.subject_id)
                        save_label_volume(pred, out / rel)
                        pred_rels.append(rel.as_posix())
                rows.append(
                    {
                        "subject_id": record["subject_id"],
                        "sex": record["sex"],
                        "age": record["age"],
                        "dataset": record["dataset"],
                        "site": "site0",
                        "scanner": "unknown",
                        "gt_path": gt_rel.as_posix(),
                        "pred_path": ";".join(pred_rels),
                    }
                )
        registry = out / "registry.csv"
        with open(registry, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        meta = {
            "labels": {str(o.label): o.name for o in spec.organs},
            "roles": roles,
            "n_subjects": spec.n_subjects,
            "dims": list(spec.dims),
            "spacing": list(spec.spacing),
            "n_folds": spec.n_folds,
            "seed": spec.seed,
            "perturbations": {f"{tr}->{te}": asdict(p) for (tr, te), p in sorted(spec.perturbations.items())},
        }
        (out / "synth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"writing synthetic cohort to {out}: {exc}") from exc
    return registry


def benchmark_pair() -> tuple[LabelVolume, LabelVolume, LabelDictionary]:
    """512x512x400 at 1.5 mm with kidneys, liver and pancreas.

    The prediction dilates every organ by one voxel and shifts the liver by
    (2, 0, 1) voxels. Used for timing evaluate_case against the oracles.
    """
    organs = (
        Ellipsoid(1, (200, 256, 200), (20, 17, 37)),
        Ellipsoid(2, (312, 256, 200), (20, 17, 37)),
        Ellipsoid(3, (190, 180, 230), (67, 50, 40)),
        Ellipsoid(4, (270, 300, 210), (40, 10, 10)),
    )
    labels = LabelDictionary({1: "right kidney", 2: "left kidney", 3: "liver", 4: "pancreas"})
    gt = generate_volume(PhantomSpec((512, 512, 400), (1.5, 1.5, 1.5), organs, subject_id="bench"))
    pred = gt
    for label in labels.labels:
        pred = perturb(pred, "dilate", 1, label)
    pred = perturb(pred, "translate", (2, 0, 1), 3)
    return gt, pred, labels

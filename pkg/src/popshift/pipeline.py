"""Glue between config, registry, files on disk and the pure modules."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from popshift import cohort as co
from popshift.config import RunConfig
from popshift.errors import DataError, IncompleteGrid
from popshift.gap import model_id
from popshift.metrics import CaseMetrics, OrganMetrics, evaluate_case
from popshift.volume_io import LabelDictionary, load_label_volume

log = logging.getLogger(__name__)

WORKERS_ENV = "POPSHIFT_WORKERS"
MISSING_FLAG = "missing_prediction"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _matches(record: co.SubjectRecord, terms: dict[str, str]) -> bool:
    for key, want in terms.items():
        have = record.age_years if key == "age" else getattr(record, key, None)
        if str(have if have is not None else "unknown").lower() != want.lower():
            return False
    return True


def build_cohorts(cfg: RunConfig, registry: Sequence[co.SubjectRecord]):
    """Cohorts and fold plans for the configured experiment kind."""
    if cfg.experiment == "sex":
        g1, g2 = co.build_sex_subgroups(registry, cfg.train_size, cfg.test_size, cfg.seed)
    elif cfg.experiment == "age":
        g1, g2 = co.build_age_subgroups(
            registry, cfg.train_size, cfg.test_size, cfg.seed, under=cfg.age_under, over=cfg.age_over
        )
    elif cfg.experiment == "cross_dataset":
        name_a, name_b = cfg.datasets
        pool = list(registry)
        if cfg.registry_b is not None:
            pool += co.load_registry(cfg.registry_b)
        reg_a = [r for r in pool if r.dataset == name_a]
        reg_b = [r for r in pool if r.dataset == name_b]
        g1, g2 = co.build_matched_cross_dataset(
            reg_a, reg_b, cfg.train_size, cfg.test_size, cfg.seed, cfg.age_bin_years, (name_a, name_b)
        )
    else:
        f1, f2 = cfg.g1_filter, cfg.g2_filter
        g1, g2 = co.build_predicate_subgroups(
            registry,
            (lambda r: _matches(r, f1), lambda r: _matches(r, f2)),
            (",".join(f"{k}={v}" for k, v in f1.items()), ",".join(f"{k}={v}" for k, v in f2.items())),
            cfg.train_size,
            cfg.test_size,
            cfg.seed,
        )
    return (g1, g2), (co.assign_folds(g1, cfg.folds, cfg.seed), co.assign_folds(g2, cfg.folds, cfg.seed))


def find_prediction(root: Path, train_role: str, fold: int, subject_id: str) -> Path | None:
    for suffix in (".nii.gz", ".nii"):
        p = root / train_role / f"fold{fold}" / f"{subject_id}{suffix}"
        if p.is_file():
            return p
    return None


def _evaluate_subject(task) -> tuple[list[CaseMetrics], list[str]]:
    subject_id, gt_path, preds, entries = task
    labels = LabelDictionary(entries)
    errors, out = [], []
    try:
        gt = load_label_volume(gt_path, labels, subject_id)
    except (DataError, OSError) as exc:
        return [], [f"{subject_id} (ground truth): {exc}"]
    for mid, pred_path in preds:
        try:
            pred = load_label_volume(pred_path, labels, subject_id)
            out.append(evaluate_case(gt, pred, labels, mid))
        except (DataError, OSError) as exc:
            errors.append(f"{subject_id} ({mid}): {exc}")
    return out, errors


def evaluate_cohorts(
    cfg: RunConfig,
    cohorts: Sequence[co.Cohort],
    folds: Sequence[co.FoldPlan],
    registry: Sequence[co.SubjectRecord],
    predictions_root: str | os.PathLike,
    workers: int | None = None,
    allow_missing: bool = False,
    test_groups: Sequence[str] | None = None,
    trained_on: Sequence[str] | None = None,
) -> list[CaseMetrics]:
    """Evaluate every (test subject, trained model, fold) cell found under ``predictions_root``.

    Predictions live at ``<root>/<train_role>/fold<k>/<subject_id>.nii[.gz]``.
    Missing files raise IncompleteGrid unless ``allow_missing``, in which case
    the cell is emitted with NaN values and a ``missing_prediction`` flag.
    """
    root = Path(predictions_root)
    by_id = {r.subject_id: r for r in registry}
    k_of = {c.role: f.k for c, f in zip(cohorts, folds)}
    models = [c.role for c in cohorts if trained_on is None or c.role in trained_on]
    tasks, missing = [], []
    for c in cohorts:
        if test_groups is not None and c.role not in test_groups:
            continue
        for sid in sorted(c.test_ids):
            rec = by_id.get(sid)
            if rec is None or not rec.gt_path:
                missing.append((sid, "ground_truth"))
                continue
            preds = []
            for role in models:
                for fold in range(k_of[role]):
                    p = find_prediction(root, role, fold, sid)
                    if p is None:
                        missing.append((sid, model_id(role, fold)))
                    else:
                        preds.append((model_id(role, fold), str(p)))
            tasks.append((sid, rec.gt_path, preds, dict(cfg.labels.entries)))
    hard_missing = [m for m in missing if m[1] == "ground_truth"]
    if hard_missing or (missing and not allow_missing):
        raise IncompleteGrid(missing)

    workers = workers or default_workers()
    log.info("evaluating %d subjects with %d worker(s)", len(tasks), workers)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate_subject, tasks))
    else:
        results = [_evaluate_subject(t) for t in tasks]

    cases, errors = [], []
    for i, (out, errs) in enumerate(results, start=1):
        cases += out
        errors += errs
        if i % 10 == 0 or i == len(results):
            log.info("evaluated %d/%d subjects", i, len(results))
    if errors:
        raise DataError("failed to load:\n  " + "\n  ".join(errors))

    nan = float("nan")
    for sid, mid in missing:
        cases.append(CaseMetrics(sid, mid, {o: _MissingMetrics(nan, nan, nan, nan) for o in cfg.labels.organs}))
    if missing:
        log.warning("%d cells flagged %s", len(missing), MISSING_FLAG)
    return sorted(cases, key=lambda c: (c.subject_id, c.model_id))


class _MissingMetrics(OrganMetrics):
    @property
    def flags(self) -> list[str]:
        return [MISSING_FLAG, *super().flags]


def training_volumes(
    cohorts: Sequence[co.Cohort],
    registry: Sequence[co.SubjectRecord],
    labels: LabelDictionary,
) -> dict[str, dict[str, dict[str, float]]]:
    """Ground-truth organ volumes (mL) of every training subject, per cohort role."""
    by_id = {r.subject_id: r for r in registry}
    out: dict[str, dict[str, dict[str, float]]] = {}
    for c in cohorts:
        vols = out.setdefault(c.role, {})
        for sid in c.train_ids:
            rec = by_id.get(sid)
            if rec is None or not rec.gt_path:
                raise IncompleteGrid([(sid, "ground_truth")])
            vol = load_label_volume(rec.gt_path, labels, sid)
            per_ml = vol.voxel_volume_mm3
            vols[sid] = {
                organ: int(np.count_nonzero(vol.labels == lab)) * per_ml / 1000.0
                for lab, organ in labels.items()
            }
    return out

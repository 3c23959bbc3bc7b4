"""Subgroup construction from a demographic registry.

All sampling uses numpy's PCG64 generator (``np.random.default_rng(seed)``)
over subject ids sorted lexicographically, so a manifest depends only on the
registry contents, the parameters and the seed, never on row order.
"""

from __future__ import annotations

import csv
import json
import os
import re
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from popshift.errors import (
    DuplicateSubjectId,
    InfeasibleMatch,
    InsufficientSubjects,
    KTooLarge,
    MissingColumn,
    UnparseableAge,
)

REQUIRED_COLUMNS = ("subject_id", "sex", "age", "dataset")
REGISTRY_COLUMNS = ("subject_id", "sex", "age", "dataset", "site", "scanner", "gt_path", "pred_path")
RNG_NAME = "numpy PCG64 (np.random.default_rng)"

_SEX = {
    "f": "female",
    "female": "female",
    "w": "female",
    "m": "male",
    "male": "male",
}
_UNKNOWN = {"", "na", "n/a", "nan", "none", "unknown", "?", "-"}
_AGE_RE = re.compile(r"^(\d+)(?:\.0+)?\s*[yY]?$")


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    sex: str  # female | male | unknown
    age_years: int | None
    dataset: str
    site: str | None = None
    scanner: str | None = None
    gt_path: str | None = None
    pred_paths: tuple[str, ...] = ()


@dataclass(frozen=True)
class Cohort:
    name: str
    role: str  # g1 | g2
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError(f"{self.name}: train and test overlap")
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"{self.name}: duplicate members")

    @property
    def members(self) -> tuple[str, ...]:
        return self.train_ids + self.test_ids


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: dict[str, int] = field(default_factory=dict)

    def fold_sizes(self) -> list[int]:
        counts = Counter(self.assignments.values())
        return [counts.get(i, 0) for i in range(self.k)]


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def parse_sex(value: str) -> str:
    return _SEX.get(value.strip().lower(), "unknown")


def parse_age(value: str, where: str = "") -> int | None:
    v = value.strip()
    if v.lower() in _UNKNOWN:
        return None
    m = _AGE_RE.match(v)
    if not m:
        raise UnparseableAge(f"{where}: cannot parse age {value!r}")
    return int(m.group(1))


def _opt(row: dict, key: str) -> str | None:
    v = (row.get(key) or "").strip()
    return None if v.lower() in _UNKNOWN else v


def load_registry(path: str | os.PathLike) -> list[SubjectRecord]:
    """Read a registry CSV; paths are resolved relative to the CSV's directory."""
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in reader.fieldnames or []]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing required columns {missing}")
        records, seen = [], {}
        for lineno, raw in enumerate(reader, start=2):
            row = {(k or "").strip(): (v or "") for k, v in raw.items()}
            sid = row["subject_id"].strip()
            if sid in seen:
                raise DuplicateSubjectId(f"{path}: subject {sid!r} on rows {seen[sid]} and {lineno}")
            seen[sid] = lineno
            gt = _opt(row, "gt_path")
            preds = tuple(str(base / p.strip()) for p in (row.get("pred_path") or "").split(";") if p.strip())
            records.append(
                SubjectRecord(
                    subject_id=sid,
                    sex=parse_sex(row["sex"]),
                    age_years=parse_age(row["age"], f"{path} row {lineno} ({sid})"),
                    dataset=row["dataset"].strip(),
                    site=_opt(row, "site"),
                    scanner=_opt(row, "scanner"),
                    gt_path=str(base / gt) if gt else None,
                    pred_paths=preds,
                )
            )
    return records


def write_registry(records: Iterable[SubjectRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGISTRY_COLUMNS)
        for r in records:
            w.writerow(
                [
                    r.subject_id,
                    r.sex,
                    "" if r.age_years is None else r.age_years,
                    r.dataset,
                    r.site or "",
                    r.scanner or "",
                    r.gt_path or "",
                    ";".join(r.pred_paths),
                ]
            )
    return path


# ---------------------------------------------------------------------------
# subgroup construction
# ---------------------------------------------------------------------------


def _draw(pool: Sequence[str], n: int, rng: np.random.Generator) -> list[str]:
    ordered = sorted(pool)
    picks = rng.permutation(len(ordered))[:n]
    return [ordered[i] for i in picks]


def _split(ids: list[str], train_size: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    return tuple(sorted(ids[:train_size])), tuple(sorted(ids[train_size:]))


def build_predicate_subgroups(
    registry: Sequence[SubjectRecord],
    predicates: tuple[Callable[[SubjectRecord], bool], Callable[[SubjectRecord], bool]],
    names: tuple[str, str],
    train_size: int,
    test_size: int,
    seed: int,
) -> tuple[Cohort, Cohort]:
    """Sample two equal-size cohorts, without replacement, from subjects matching each predicate.

    A subject drawn for g1 is never eligible for g2.
    """
    if train_size < 1 or test_size < 0:
        raise ValueError("train_size must be >= 1 and test_size >= 0")
    need = train_size + test_size
    pools = [[r.subject_id for r in registry if pred(r)] for pred in predicates]
    short = [(n, len(p)) for n, p in zip(names, pools) if len(p) < need]
    if short:
        detail = ", ".join(f"{n}: {have} available, {need} requested" for n, have in short)
        raise InsufficientSubjects(detail)
    rng = np.random.default_rng(seed)
    g1_ids = _draw(pools[0], need, rng)
    taken = set(g1_ids)
    pool2 = [s for s in pools[1] if s not in taken]
    if len(pool2) < need:
        raise InsufficientSubjects(f"{names[1]}: {len(pool2)} available after excluding {names[0]}, {need} requested")
    g2_ids = _draw(pool2, need, rng)
    cohorts = []
    for role, name, ids in (("g1", names[0], g1_ids), ("g2", names[1], g2_ids)):
        train, test = _split(ids, train_size)
        cohorts.append(Cohort(name, role, train, test))
    return cohorts[0], cohorts[1]


def build_sex_subgroups(registry, train_size: int, test_size: int, seed: int) -> tuple[Cohort, Cohort]:
    return build_predicate_subgroups(
        registry,
        (lambda r: r.sex == "female", lambda r: r.sex == "male"),
        ("female", "male"),
        train_size,
        test_size,
        seed,
    )


def build_age_subgroups(
    registry,
    train_size: int,
    test_size: int,
    seed: int,
    under: int = 50,
    over: int = 70,
) -> tuple[Cohort, Cohort]:
    """g1: age < under, g2: age > over. Both bounds are strict."""
    return build_predicate_subgroups(
        registry,
        (
            lambda r: r.age_years is not None and r.age_years < under,
            lambda r: r.age_years is not None and r.age_years > over,
        ),
        (f"under{under}", f"over{over}"),
        train_size,
        test_size,
        seed,
    )


def stratum_of(record: SubjectRecord, age_bin_years: int = 10) -> tuple[str, int] | None:
    if record.sex == "unknown" or record.age_years is None:
        return None
    return (record.sex, record.age_years // age_bin_years)


def largest_remainder(total: int, weights: dict) -> dict:
    """Integer quotas summing to ``total``, proportional to ``weights``.

    Ties in the remainder go to the larger weight, then to the smaller key.
    """
    wsum = sum(weights.values())
    if wsum == 0:
        return {k: 0 for k in weights}
    exact = {k: total * w / wsum for k, w in weights.items()}
    quotas = {k: int(v) for k, v in exact.items()}
    short = total - sum(quotas.values())
    order = sorted(weights, key=lambda k: (-(exact[k] - quotas[k]), -weights[k], k))
    for k in order[:short]:
        quotas[k] += 1
    return quotas


def build_matched_cross_dataset(
    reg_a: Sequence[SubjectRecord],
    reg_b: Sequence[SubjectRecord],
    train_size: int,
    test_size: int,
    seed: int,
    age_bin_years: int = 10,
    names: tuple[str, str] = ("A", "B"),
) -> tuple[Cohort, Cohort]:
    """Sex x age-bin matched cohorts from two registries.

    Quotas follow the pooled stratum distribution (largest remainder) and are
    identical for both cohorts, for the member set and for the train split.
    """
    if train_size < 1 or test_size < 0:
        raise ValueError("train_size must be >= 1 and test_size >= 0")
    overlap = {r.subject_id for r in reg_a} & {r.subject_id for r in reg_b}
    if overlap:
        raise DuplicateSubjectId(f"subject ids present in both registries: {sorted(overlap)[:10]}")
    strata_a: dict = {}
    strata_b: dict = {}
    for reg, strata in ((reg_a, strata_a), (reg_b, strata_b)):
        for r in reg:
            key = stratum_of(r, age_bin_years)
            if key is not None:
                strata.setdefault(key, []).append(r.subject_id)
    pooled = Counter({k: len(v) for k, v in strata_a.items()})
    pooled.update({k: len(v) for k, v in strata_b.items()})
    quotas = largest_remainder(train_size + test_size, dict(pooled))
    deficient = [
        (k, q, len(strata_a.get(k, [])), len(strata_b.get(k, [])))
        for k, q in sorted(quotas.items())
        if q > len(strata_a.get(k, [])) or q > len(strata_b.get(k, []))
    ]
    if deficient:
        detail = "; ".join(
            f"{sex} age {b * age_bin_years}-{(b + 1) * age_bin_years - 1}: quota {q}, {names[0]} has {na}, {names[1]} has {nb}"
            for (sex, b), q, na, nb in deficient
        )
        raise InfeasibleMatch(detail)
    train_quotas = largest_remainder(train_size, {k: q for k, q in quotas.items() if q})

    rng = np.random.default_rng(seed)
    cohorts = []
    for role, name, strata in (("g1", names[0], strata_a), ("g2", names[1], strata_b)):
        train, test = [], []
        for key in sorted(quotas):
            q = quotas[key]
            if not q:
                continue
            ids = _draw(strata[key], q, rng)
            n_train = train_quotas.get(key, 0)
            train += ids[:n_train]
            test += ids[n_train:]
        cohorts.append(Cohort(name, role, tuple(sorted(train)), tuple(sorted(test))))
    return cohorts[0], cohorts[1]


def stratum_histogram(ids: Iterable[str], registry: Sequence[SubjectRecord], age_bin_years: int = 10) -> Counter:
    by_id = {r.subject_id: r for r in registry}
    return Counter(stratum_of(by_id[i], age_bin_years) for i in ids)


def assign_folds(cohort: Cohort, k: int = 5, seed: int = 0) -> FoldPlan:
    """Balanced k-fold partition of the training set; the test set stays hold-out."""
    n = len(cohort.train_ids)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise KTooLarge(f"{cohort.name}: k={k} exceeds {n} training subjects")
    rng = np.random.default_rng([seed, zlib.crc32(cohort.role.encode())])
    order = rng.permutation(n)
    ids = sorted(cohort.train_ids)
    return FoldPlan(k, {ids[j]: pos % k for pos, j in enumerate(order)})


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def manifest_dict(cohort: Cohort, folds: FoldPlan) -> dict:
    return {
        "name": cohort.name,
        "role": cohort.role,
        "train": list(cohort.train_ids),
        "test": list(cohort.test_ids),
        "folds": {sid: folds.assignments[sid] for sid in sorted(folds.assignments)},
        "k": folds.k,
    }


def write_manifest(cohort: Cohort, folds: FoldPlan, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_dict(cohort, folds), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | os.PathLike) -> tuple[Cohort, FoldPlan]:
    data = json.loads(Path(path).read_text())
    for key in ("name", "role", "train", "test", "folds"):
        if key not in data:
            raise MissingColumn(f"{path}: manifest lacks {key!r}")
    folds = {str(k): int(v) for k, v in data["folds"].items()}
    k = int(data.get("k", max(folds.values(), default=-1) + 1))
    return (
        Cohort(data["name"], data["role"], tuple(data["train"]), tuple(data["test"])),
        FoldPlan(k, folds),
    )


def summary_table(cohorts: Sequence[Cohort], registry: Sequence[SubjectRecord], age_bin_years: int = 10) -> str:
    """Plain-text count table per sex and age bin for each cohort."""
    by_id = {r.subject_id: r for r in registry}
    lines = [f"{'cohort':<12}{'role':<6}{'split':<7}{'sex':<9}{'age bin':<10}{'n':>5}"]
    for c in cohorts:
        for split, ids in (("train", c.train_ids), ("test", c.test_ids)):
            counts = Counter()
            for sid in ids:
                r = by_id[sid]
                b = "unknown" if r.age_years is None else f"{r.age_years // age_bin_years * age_bin_years}s"
                counts[(r.sex, b)] += 1
            for (sex, b), n in sorted(counts.items()):
                lines.append(f"{c.name:<12}{c.role:<6}{split:<7}{sex:<9}{b:<10}{n:>5}")
    return "\n".join(lines)

"""Performance gap, significance tests and the organ-volume diversity proxy.

For a test subgroup g, the matched model was trained on g and the cross model
on the other subgroup. The gap is the difference of their mean scores,
cross minus matched, relative to the average of the two means, in percent.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import special

from popshift.cohort import Cohort, FoldPlan
from popshift.errors import (
    DegenerateDenominator,
    IncompleteGrid,
    MismatchedSamples,
    TooFewSamples,
    ZeroVariance,
)
from popshift.metrics import CaseMetrics

METRICS = ("dice", "hd95")
TTEST_MODES = ("paired", "welch")
ALPHA = 0.05
STD_CONVENTION = "sample (n-1)"
AGGREGATION = "fold-first: per-subject mean over folds, then pooled over subjects"

GAP_COLUMNS = [
    "dataset",
    "organ",
    "metric",
    "test_group",
    "delta_p_percent",
    "p_value",
    "significant",
    "direction",
    "n",
    "n_excluded",
    "note",
]
DIVERSITY_COLUMNS = ["cohort", "role", "organ", "volume_std_ml", "n"]
SCATTER_COLUMNS = ["subgroup", "organ", "volume_std_ml", "mean_dice"]


@dataclass(frozen=True)
class PerformanceSample:
    """Per-subject scores of one model on one test subgroup: P(test_group, S(trained_on))."""

    test_group: str
    trained_on: str
    organ: str
    metric: str
    values: tuple[float, ...]
    subject_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.values:
            raise TooFewSamples("a performance sample needs at least one value")
        if self.subject_ids and len(self.subject_ids) != len(self.values):
            raise ValueError("subject_ids and values differ in length")

    @property
    def mean(self) -> float:
        return math.fsum(self.values) / len(self.values)


@dataclass(frozen=True)
class GapResult:
    test_group: str
    organ: str
    metric: str
    delta_p_percent: float
    p_value: float
    significant: bool
    direction: str
    dataset: str = ""
    n: int = 0
    n_excluded: int = 0
    note: str = ""


@dataclass(frozen=True)
class DiversityResult:
    role: str
    organ: str
    volume_std_ml: float
    n: int
    cohort: str = ""


@dataclass
class ExperimentReport:
    gaps: list[GapResult]
    diversity: list[DiversityResult]
    scatter: list[dict]
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# core statistics
# ---------------------------------------------------------------------------


def _check_pair(p_match: PerformanceSample, p_cross: PerformanceSample) -> None:
    for attr in ("test_group", "organ", "metric"):
        if getattr(p_match, attr) != getattr(p_cross, attr):
            raise MismatchedSamples(
                f"{attr} differs: {getattr(p_match, attr)!r} vs {getattr(p_cross, attr)!r}"
            )
    if p_match.trained_on != p_match.test_group:
        raise MismatchedSamples("matched sample must be trained on its test group")
    if p_cross.trained_on == p_cross.test_group:
        raise MismatchedSamples("cross sample must be trained on the other group")


def gap_percent(mean_match: float, mean_cross: float) -> float:
    denom = 0.5 * (mean_match + mean_cross)
    if denom == 0:
        raise DegenerateDenominator(f"means {mean_match} and {mean_cross} average to zero")
    return (mean_cross - mean_match) / denom * 100.0


def performance_gap(p_match: PerformanceSample, p_cross: PerformanceSample) -> float:
    """Relative change (%) when the test group is segmented by the cross-trained model."""
    _check_pair(p_match, p_cross)
    return gap_percent(p_match.mean, p_cross.mean)


def interpret_direction(delta_p: float, metric: str) -> str:
    """Dice: lower is worse. HD95: higher is worse."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if delta_p == 0 or math.isnan(delta_p):
        return "neutral"
    worse = delta_p < 0 if metric == "dice" else delta_p > 0
    return "worse_off_distribution" if worse else "better_off_distribution"


def _two_sided_p(t: float, df: float) -> float:
    # P(|T| > |t|) via the regularised incomplete beta function
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """(t, df, two-sided p) for paired samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) != len(b):
        raise MismatchedSamples(f"paired test needs equal lengths, got {len(a)} and {len(b)}")
    n = len(a)
    if n < 2:
        raise TooFewSamples(f"paired test needs n >= 2, got {n}")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise ZeroVariance(f"paired differences are constant ({float(d[0])})")
    t = float(d.mean()) / (sd / math.sqrt(n))
    df = n - 1.0
    return t, df, _two_sided_p(t, df)


def welch_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """(t, Welch-Satterthwaite df, two-sided p) for independent samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise TooFewSamples(f"Welch test needs n >= 2 per group, got {na} and {nb}")
    va = float(np.var(a, ddof=1)) / na
    vb = float(np.var(b, ddof=1)) / nb
    se2 = va + vb
    if se2 == 0.0:
        raise ZeroVariance("both samples are constant")
    t = (float(a.mean()) - float(b.mean())) / math.sqrt(se2)
    df = se2 * se2 / (va * va / (na - 1) + vb * vb / (nb - 1))
    return t, df, _two_sided_p(t, df)


def significance(
    p_match: PerformanceSample, p_cross: PerformanceSample, mode: str = "paired"
) -> float:
    """Two-sided p-value of the matched vs cross difference."""
    if mode == "paired":
        if p_match.subject_ids and p_match.subject_ids != p_cross.subject_ids:
            raise MismatchedSamples("paired samples must list the same subjects in the same order")
        return paired_t(p_match.values, p_cross.values)[2]
    if mode == "welch":
        return welch_t(p_match.values, p_cross.values)[2]
    raise ValueError(f"unknown t-test mode {mode!r}")


def diversity(volumes_ml: Sequence[float]) -> float:
    """Sample standard deviation (n-1) of organ volumes."""
    v = np.asarray(volumes_ml, dtype=float)
    if len(v) < 2:
        raise TooFewSamples(f"diversity needs n >= 2 volumes, got {len(v)}")
    return float(np.std(v, ddof=1))


# ---------------------------------------------------------------------------
# experiment aggregation
# ---------------------------------------------------------------------------


def model_id(train_role: str, fold: int) -> str:
    return f"{train_role}_fold{fold}"


def parse_model_id(mid: str) -> tuple[str, int]:
    role, sep, fold = mid.rpartition("_fold")
    if not sep or not fold.isdigit():
        raise ValueError(f"model id {mid!r} is not of the form <role>_fold<k>")
    return role, int(fold)


def _gap_cell(
    match: PerformanceSample | None,
    cross: PerformanceSample | None,
    mode: str,
    n_total: int,
    dataset: str,
    group: str,
    organ: str,
    metric: str,
) -> GapResult:
    if match is None:
        return GapResult(group, organ, metric, math.nan, math.nan, False, "neutral", dataset, 0, n_total, "no_valid_subjects")
    notes = []
    try:
        delta = performance_gap(match, cross)
    except DegenerateDenominator:
        # both means are zero: the two models perform identically
        delta = 0.0
        notes.append("both_means_zero")
    try:
        p = significance(match, cross, mode)
    except ZeroVariance:
        diff = match.mean - cross.mean
        p = 1.0 if diff == 0 else 0.0
        notes.append("zero_variance")
    except TooFewSamples:
        p = math.nan
        notes.append("too_few_samples")
    n = len(match.values)
    return GapResult(
        group,
        organ,
        metric,
        delta,
        p,
        bool(p < ALPHA),
        interpret_direction(delta, metric),
        dataset,
        n,
        n_total - n,
        ";".join(notes),
    )


def aggregate_experiment(
    cases: Iterable[CaseMetrics],
    cohorts: tuple[Cohort, Cohort],
    folds: tuple[FoldPlan, FoldPlan],
    organs: Sequence[str],
    train_volumes: Mapping[str, Mapping[str, Mapping[str, float]]] | None = None,
    dataset: str = "",
    mode: str = "paired",
) -> ExperimentReport:
    """Table-shaped gaps for every (test group, organ, metric) plus diversity rows.

    ``cases`` must hold one CaseMetrics per (test subject, model, fold), with
    model ids ``<train_role>_fold<k>``. ``train_volumes`` maps role -> subject
    -> organ -> gt volume (mL) for training subjects.
    """
    if mode not in TTEST_MODES:
        raise ValueError(f"unknown t-test mode {mode!r}")
    roles = [c.role for c in cohorts]
    k_of = {c.role: f.k for c, f in zip(cohorts, folds)}
    index: dict[tuple[str, str, int], CaseMetrics] = {}
    for case in cases:
        role, fold = parse_model_id(case.model_id)
        index[(case.subject_id, role, fold)] = case

    missing = []
    for cohort in cohorts:
        for sid in cohort.test_ids:
            for role in roles:
                for fold in range(k_of[role]):
                    case = index.get((sid, role, fold))
                    if case is None:
                        missing.append((sid, model_id(role, fold)))
                    else:
                        for organ in organs:
                            if organ not in case.per_organ:
                                missing.append((sid, model_id(role, fold), organ))
    if missing:
        raise IncompleteGrid(missing)

    def subject_value(sid: str, role: str, organ: str, metric: str) -> float:
        attr = "dice" if metric == "dice" else "hd95_mm"
        vals = [getattr(index[(sid, role, f)].per_organ[organ], attr) for f in range(k_of[role])]
        if any(math.isnan(v) for v in vals):
            return math.nan
        return math.fsum(vals) / len(vals)

    gaps, exclusions = [], {}
    matched_dice: dict[tuple[str, str], float] = {}
    for cohort in cohorts:
        group = cohort.role
        other = next(r for r in roles if r != group)
        test_ids = sorted(cohort.test_ids)
        for organ in organs:
            for metric in METRICS:
                pairs = []
                for sid in test_ids:
                    vm = subject_value(sid, group, organ, metric)
                    vc = subject_value(sid, other, organ, metric)
                    if not (math.isnan(vm) or math.isnan(vc)):
                        pairs.append((sid, vm, vc))
                if pairs:
                    ids = tuple(s for s, _, _ in pairs)
                    match = PerformanceSample(group, group, organ, metric, tuple(v for _, v, _ in pairs), ids)
                    cross = PerformanceSample(group, other, organ, metric, tuple(v for _, _, v in pairs), ids)
                    if metric == "dice":
                        matched_dice[(group, organ)] = match.mean
                else:
                    match = cross = None
                cell = _gap_cell(match, cross, mode, len(test_ids), dataset, group, organ, metric)
                exclusions[f"{group}/{organ}/{metric}"] = cell.n_excluded
                gaps.append(cell)

    div_rows, scatter = [], []
    if train_volumes is not None:
        for cohort in cohorts:
            vols = train_volumes.get(cohort.role, {})
            absent = [sid for sid in cohort.train_ids if sid not in vols]
            if absent:
                raise IncompleteGrid([(sid, "train_volume") for sid in absent])
            for organ in organs:
                values = [vols[sid][organ] for sid in sorted(cohort.train_ids)]
                std = diversity(values) if len(values) >= 2 else math.nan
                div_rows.append(DiversityResult(cohort.role, organ, std, len(values), cohort.name))
                scatter.append(
                    {
                        "subgroup": cohort.name,
                        "organ": organ,
                        "volume_std_ml": std,
                        "mean_dice": matched_dice.get((cohort.role, organ), math.nan),
                    }
                )

    metadata = {
        "dataset": dataset,
        "cohorts": {c.role: c.name for c in cohorts},
        "ttest_mode": mode,
        "alpha": ALPHA,
        "std_denominator": STD_CONVENTION,
        "aggregation": AGGREGATION,
        "folds": k_of,
        "exclusions": exclusions,
    }
    return ExperimentReport(gaps, div_rows, scatter, metadata)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _cell(x) -> str:
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _write_csv(path: Path, columns: list[str], rows: list[dict], header: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def write_reports(report: ExperimentReport, out_dir: str | os.PathLike, metadata: dict | None = None) -> dict[str, Path]:
    """gap_table.csv, diversity_table.csv, scatter.csv and run_metadata.json.

    Each CSV opens with ``# key: value`` lines carrying the run conventions;
    gap percentages are rounded to 2 decimals here and nowhere else.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {**report.metadata, **(metadata or {})}
    header = [f"{k}: {json.dumps(meta[k], sort_keys=True)}" for k in sorted(meta) if k != "exclusions"]

    gap_rows = []
    for g in report.gaps:
        row = asdict(g)
        row["delta_p_percent"] = round(g.delta_p_percent, 2) if not math.isnan(g.delta_p_percent) else math.nan
        gap_rows.append(row)
    div_rows = [asdict(d) for d in report.diversity]
    paths = {
        "gap": out / "gap_table.csv",
        "diversity": out / "diversity_table.csv",
        "scatter": out / "scatter.csv",
        "metadata": out / "run_metadata.json",
    }
    _write_csv(paths["gap"], GAP_COLUMNS, gap_rows, header)
    _write_csv(paths["diversity"], DIVERSITY_COLUMNS, div_rows, header)
    _write_csv(paths["scatter"], SCATTER_COLUMNS, report.scatter, header)
    paths["metadata"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def read_gap_table(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(row for row in fh if not row.startswith("#")))


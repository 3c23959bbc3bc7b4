"""Quick oracle suite behind ``popshift selftest``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from popshift import cohort as co
from popshift import gap, metrics, phantom
from popshift.errors import InsufficientSubjects


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def random_mask_pair(rng: np.random.Generator, max_dim: int = 32):
    """Two smoothed-noise blobs on a random grid of at most ``max_dim`` per axis."""
    shape = tuple(int(s) for s in rng.integers(4, max_dim + 1, size=3))
    out = []
    for _ in range(2):
        while True:
            noise = ndimage.gaussian_filter(rng.random(shape), sigma=float(rng.uniform(0.6, 2.0)))
            m = noise > np.quantile(noise, rng.uniform(0.5, 0.97))
            if m.any():
                break
        out.append(m)
    spacing = tuple(float(s) for s in rng.uniform(0.4, 3.0, size=3))
    return out[0], out[1], spacing


def check_metric_oracles(n: int, seed: int) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        a, b, sp = random_mask_pair(rng, 24)
        if metrics.dice(a, b) != phantom.brute_force_dice(a, b):
            return Check("metric oracles", False, f"dice differs on case {i}")
        worst = max(worst, abs(metrics.hd95(a, b, sp) - phantom.brute_force_hd95(a, b, sp)))
    return Check("metric oracles", worst <= 1e-9, f"{n} pairs, max |hd95 - oracle| = {worst:.3g} mm")


def check_spacing_covariance(n: int, seed: int) -> Check:
    rng = np.random.default_rng(seed + 1)
    for _ in range(n):
        a, b, sp = random_mask_pair(rng, 20)
        h = metrics.hd95(a, b, sp)
        v = metrics.organ_volume(a, sp)
        for s in (0.5, 2.0, 3.0):
            sp2 = tuple(s * x for x in sp)
            if not math.isclose(metrics.hd95(a, b, sp2), s * h, rel_tol=1e-12, abs_tol=1e-12):
                return Check("spacing covariance", False, f"hd95 scale {s}")
            if not math.isclose(metrics.organ_volume(a, sp2), s**3 * v, rel_tol=1e-12):
                return Check("spacing covariance", False, f"volume scale {s}")
    return Check("spacing covariance", True, f"{n} pairs x 3 scales")


def check_statistics(n: int, seed: int) -> Check:
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(3, 30))
        a = rng.normal(0.9, 0.05, k)
        b = a + rng.normal(0.01, 0.02, k)
        c = rng.normal(0.85, 0.08, int(rng.integers(3, 30)))
        worst = max(
            worst,
            abs(gap.paired_t(a, b)[2] - stats.ttest_rel(a, b).pvalue),
            abs(gap.welch_t(a, c)[2] - stats.ttest_ind(a, c, equal_var=False).pvalue),
        )
    return Check("t-test p-values", worst <= 1e-6, f"{n} fixtures, max |dp| = {worst:.3g}")


def check_volume(seed: int) -> Check:
    worst = 0.0
    for r in range(8, 17):
        c = r + 2.0
        spec = phantom.PhantomSpec((2 * r + 5,) * 3, (1.0, 1.0, 1.0), (phantom.Ellipsoid(1, (c, c, c), (r, r, r)),))
        vol = phantom.generate_volume(spec)
        ml = metrics.organ_volume(vol.labels == 1, vol.spacing)
        exact = 4.0 / 3.0 * math.pi * r**3 / 1000.0
        worst = max(worst, abs(ml - exact) / exact)
    return Check("sphere volumes", worst < 0.02, f"max relative error {worst:.4f}")


def check_cohorts(n: int, seed: int) -> Check:
    rng = np.random.default_rng(seed + 3)
    for i in range(n):
        recs = [
            co.SubjectRecord(f"s{j:03d}", str(rng.choice(["female", "male"])), int(rng.integers(20, 91)), "X")
            for j in range(int(rng.integers(40, 80)))
        ]
        try:
            g1, g2 = co.build_age_subgroups(recs, 3, 2, seed + i)
        except InsufficientSubjects:
            continue
        ages = {r.subject_id: r.age_years for r in recs}
        if any(ages[s] >= 50 for s in g1.members) or any(ages[s] <= 70 for s in g2.members):
            return Check("cohort invariants", False, f"age boundary violated on fixture {i}")
        if len(g1.train_ids) != len(g2.train_ids) or set(g1.members) & set(g2.members):
            return Check("cohort invariants", False, f"size/overlap violated on fixture {i}")
    return Check("cohort invariants", True, f"{n} fixtures")


def run_selftest(n: int = 30, seed: int = 0) -> list[Check]:
    return [
        check_metric_oracles(n, seed),
        check_spacing_covariance(max(1, n // 3), seed),
        check_statistics(n, seed),
        check_volume(seed),
        check_cohorts(n, seed),
    ]

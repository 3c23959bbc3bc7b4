#!/usr/bin/env python3
"""Recompute performance gaps from case_metrics.csv with nothing but the stdlib.

Deliberately shares no code with the package: it is the cross-check for
``popshift gap``. Prints CSV rows test_group,organ,metric,delta_p_percent.

    python scripts/independent_gap.py out/case_metrics.csv out/cohort_g1.json out/cohort_g2.json
"""

import csv
import json
import math
import sys


def main(case_csv, manifest_g1, manifest_g2):
    groups = {}
    for path in (manifest_g1, manifest_g2):
        with open(path) as fh:
            m = json.load(fh)
        groups[m["role"]] = m["test"]

    # (subject, train_role, organ, column) -> list of fold values
    values = {}
    organs = []
    with open(case_csv) as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            role = row["model_id"].rsplit("_fold", 1)[0]
            if row["organ"] not in organs:
                organs.append(row["organ"])
            for col in ("dice", "hd95_mm"):
                v = float(row[col]) if row[col] else float("nan")
                values.setdefault((row["subject_id"], role, row["organ"], col), []).append(v)

    def per_subject(sid, role, organ, col):
        vs = values[(sid, role, organ, col)]
        return sum(vs) / len(vs)

    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["test_group", "organ", "metric", "delta_p_percent"])
    for group in sorted(groups):
        other = [g for g in groups if g != group][0]
        for organ in organs:
            for metric, col in (("dice", "dice"), ("hd95", "hd95_mm")):
                matched, cross = [], []
                for sid in groups[group]:
                    a = per_subject(sid, group, organ, col)
                    b = per_subject(sid, other, organ, col)
                    if math.isnan(a) or math.isnan(b):
                        continue
                    matched.append(a)
                    cross.append(b)
                if not matched:
                    out.writerow([group, organ, metric, "nan"])
                    continue
                mean_m = sum(matched) / len(matched)
                mean_c = sum(cross) / len(cross)
                avg = (mean_m + mean_c) / 2
                delta = 0.0 if avg == 0 else (mean_c - mean_m) / avg * 100
                out.writerow([group, organ, metric, repr(delta)])


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    main(*sys.argv[1:])

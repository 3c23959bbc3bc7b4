"""``popshift`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from popshift import cohort as co
from popshift import gap, phantom, pipeline
from popshift.config import load_config
from popshift.errors import ConfigError, DataError, IncompleteGrid
from popshift.metrics import CONVENTIONS, read_case_metrics, write_case_metrics
from popshift.volume_io import CANONICAL_AXIS_ORDER

log = logging.getLogger("popshift")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _manifest_paths(cfg, given):
    if given:
        return [Path(p) for p in given]
    return [cfg.output_dir / "cohort_g1.json", cfg.output_dir / "cohort_g2.json"]


def _read_manifests(paths):
    pairs = [co.read_manifest(p) for p in paths]
    if sorted(c.role for c, _ in pairs) != ["g1", "g2"]:
        raise DataError(f"need one g1 and one g2 manifest, got roles {[c.role for c, _ in pairs]}")
    pairs.sort(key=lambda cf: cf[0].role)
    return tuple(c for c, _ in pairs), tuple(f for _, f in pairs)


def cmd_cohort(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
    registry = co.load_registry(cfg.registry)
    cohorts, folds = pipeline.build_cohorts(cfg, registry)
    for c, f in zip(cohorts, folds):
        path = co.write_manifest(c, f, cfg.output_dir / f"cohort_{c.role}.json")
        log.info("wrote %s (%d train, %d test)", path, len(c.train_ids), len(c.test_ids))
    if cfg.registry_b:
        registry += co.load_registry(cfg.registry_b)
    print(co.summary_table(cohorts, registry, cfg.age_bin_years))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
    cohorts, folds = _read_manifests(_manifest_paths(cfg, args.manifests))
    registry = co.load_registry(cfg.registry)
    if cfg.registry_b:
        registry += co.load_registry(cfg.registry_b)
    cases = pipeline.evaluate_cohorts(
        cfg,
        cohorts,
        folds,
        registry,
        args.predictions_root,
        workers=args.workers,
        allow_missing=args.allow_missing,
        test_groups=args.test_group,
        trained_on=args.trained_on,
    )
    out = Path(args.out) if args.out else cfg.output_dir / "case_metrics.csv"
    write_case_metrics(cases, out)
    n_flagged = sum(1 for c in cases for m in c.per_organ.values() if m.flags)
    log.info("wrote %s: %d cases, %d organ rows with undefined values", out, len(cases), n_flagged)
    return EXIT_OK


def cmd_gap(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir, ttest=args.ttest)
    cohorts, folds = _read_manifests(_manifest_paths(cfg, args.manifests))
    paths = args.case_metrics or [cfg.output_dir / "case_metrics.csv"]
    cases = [c for p in paths for c in read_case_metrics(p)]
    # one file may hold several pairings; require all four to be represented
    seen = set()
    test_of = {sid: c.role for c in cohorts for sid in c.test_ids}
    for case in cases:
        if case.subject_id in test_of:
            seen.add((gap.parse_model_id(case.model_id)[0], test_of[case.subject_id]))
    need = {(a.role, b.role) for a in cohorts for b in cohorts}
    if need - seen:
        raise IncompleteGrid([f"train={tr} test={te}" for tr, te in sorted(need - seen)])

    volumes = None
    if not args.no_diversity:
        registry = co.load_registry(cfg.registry)
        if cfg.registry_b:
            registry += co.load_registry(cfg.registry_b)
        volumes = pipeline.training_volumes(cohorts, registry, cfg.labels)
    report = gap.aggregate_experiment(
        cases, cohorts, folds, cfg.labels.organs, volumes, cfg.dataset, cfg.ttest
    )
    meta = {
        **cfg.conventions(),
        "metric_conventions": CONVENTIONS,
        "axis_order": CANONICAL_AXIS_ORDER,
        "rng": co.RNG_NAME,
        "case_metrics": [Path(p).name for p in paths],
    }
    written = gap.write_reports(report, cfg.output_dir, meta)
    for g in report.gaps:
        mark = "*" if g.significant else " "
        print(f"{g.test_group:<4}{g.organ:<16}{g.metric:<6}{g.delta_p_percent:>9.2f}%  p={g.p_value:.4g}{mark}  {g.direction}")
    log.info("wrote %s", ", ".join(str(p) for p in written.values()))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = phantom.default_cohort_spec(
        n_subjects=args.subjects,
        grid=args.grid,
        spacing=args.spacing,
        cross=phantom.Perturbation(args.cross_op, args.cross_magnitude),
        matched=phantom.Perturbation(args.matched_op, args.matched_magnitude),
        n_folds=args.folds,
        seed=args.seed,
        dataset=args.dataset,
    )
    out = Path(args.out_dir)
    registry = phantom.synth_cohort(spec, out)
    half = max(1, args.subjects // 2)
    labels = "\n".join(f"{o.label} = {o.name}" for o in spec.organs)
    (out / "run.ini").write_text(
        "[run]\nexperiment = sex\nregistry = registry.csv\n"
        f"dataset = {args.dataset}\nseed = {args.seed}\noutput_dir = out\n\n"
        f"[cohort]\ntrain_size = {half}\ntest_size = {args.subjects - half}\nfolds = {args.folds}\n\n"
        "[metrics]\nttest = paired\n\n"
        f"[labels]\n{labels}\n"
    )
    print(f"wrote {registry} and {out / 'run.ini'}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from popshift.selftest import run_selftest

    checks = run_selftest(args.n, args.seed)
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name}: {c.detail}")
    return EXIT_OK if all(c.ok for c in checks) else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="popshift", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="run config (INI)")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--output-dir", help="override [run] output_dir")

    sp = sub.add_parser("cohort", help="build g1/g2 manifests and fold plans")
    with_config(sp)
    sp.set_defaults(func=cmd_cohort)

    sp = sub.add_parser("evaluate", help="per-case Dice/HD95/volume for every pairing")
    with_config(sp)
    sp.add_argument("--manifests", nargs=2, help="g1 and g2 manifests (default: output_dir/cohort_g*.json)")
    sp.add_argument("--predictions-root", required=True)
    sp.add_argument("--out", help="case metrics CSV (default: output_dir/case_metrics.csv)")
    sp.add_argument("--workers", type=int, help=f"worker processes (default ${pipeline.WORKERS_ENV} or 1)")
    sp.add_argument("--test-group", nargs="+", choices=["g1", "g2"])
    sp.add_argument("--trained-on", nargs="+", choices=["g1", "g2"])
    sp.add_argument("--allow-missing", action="store_true", help="flag missing predictions instead of failing")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gap", help="gap, diversity and scatter tables")
    with_config(sp)
    sp.add_argument("--manifests", nargs=2)
    sp.add_argument("--case-metrics", nargs="+", help="one or more case metric CSVs covering all pairings")
    sp.add_argument("--ttest", choices=["paired", "welch"], help="override [metrics] ttest")
    sp.add_argument("--no-diversity", action="store_true", help="skip loading training ground truth")
    sp.set_defaults(func=cmd_gap)

    sp = sub.add_parser("synth", help="generate a synthetic phantom cohort")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--subjects", type=int, default=20, help="subjects per subgroup")
    sp.add_argument("--grid", type=int, default=48)
    sp.add_argument("--spacing", type=float, default=1.0)
    sp.add_argument("--cross-op", default="erode", choices=["none", "erode", "dilate", "translate"])
    sp.add_argument("--cross-magnitude", type=int, default=1)
    sp.add_argument("--matched-op", default="none", choices=["none", "erode", "dilate", "translate"])
    sp.add_argument("--matched-magnitude", type=int, default=0)
    sp.add_argument("--folds", type=int, default=1)
    sp.add_argument("--dataset", default="SYN")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("selftest", help="run the metric/statistics oracle suite")
    sp.add_argument("--n", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

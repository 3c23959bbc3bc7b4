"""Run configuration: an INI file with ``[run]``, ``[cohort]``, ``[metrics]``
and ``[labels]`` sections. Relative paths resolve against the file's directory.

Example::

    [run]
    experiment = sex
    registry = registry.csv
    dataset = TS
    seed = 0
    output_dir = out

    [cohort]
    train_size = 150
    test_size = 40
    folds = 5

    [metrics]
    ttest = paired

    [labels]
    1 = right kidney
    2 = left kidney
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from popshift.errors import ConfigError
from popshift.volume_io import LabelDictionary

EXPERIMENTS = ("sex", "age", "cross_dataset", "custom")
PERCENTILE_CONVENTIONS = ("nearest_rank_95",)
TTEST_MODES = ("paired", "welch")


@dataclass(frozen=True)
class RunConfig:
    labels: LabelDictionary
    registry: Path
    experiment: str
    seed: int
    dataset: str = ""
    train_size: int = 0
    test_size: int = 0
    folds: int = 5
    age_under: int = 50
    age_over: int = 70
    age_bin_years: int = 10
    # cross_dataset: g1 and g2 dataset names, optionally from a second registry
    datasets: tuple[str, str] | None = None
    registry_b: Path | None = None
    # custom: column=value filters
    g1_filter: dict[str, str] = field(default_factory=dict)
    g2_filter: dict[str, str] = field(default_factory=dict)
    percentile: str = "nearest_rank_95"
    ttest: str = "paired"
    output_dir: Path = Path("out")
    source: Path | None = None

    def validate(self) -> "RunConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.ttest not in TTEST_MODES:
            raise ConfigError(f"ttest must be one of {TTEST_MODES}, got {self.ttest!r}")
        if self.percentile not in PERCENTILE_CONVENTIONS:
            raise ConfigError(f"percentile must be one of {PERCENTILE_CONVENTIONS}")
        if not self.registry.is_file():
            raise ConfigError(f"registry not found: {self.registry}")
        if self.registry_b is not None and not self.registry_b.is_file():
            raise ConfigError(f"registry_b not found: {self.registry_b}")
        if self.experiment == "cross_dataset" and self.datasets is None:
            raise ConfigError("cross_dataset experiments need [cohort] datasets = <g1>, <g2>")
        if self.experiment == "custom" and not (self.g1_filter and self.g2_filter):
            raise ConfigError("custom experiments need [cohort] g1_filter and g2_filter")
        if len(self.labels) == 0:
            raise ConfigError("[labels] section is empty")
        return self

    def conventions(self) -> dict:
        return {
            "percentile": self.percentile,
            "ttest_mode": self.ttest,
            "seed": self.seed,
            "experiment": self.experiment,
        }


def _filter(text: str) -> dict[str, str]:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"filter term {part!r} is not column=value")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | os.PathLike, **overrides) -> RunConfig:
    """Parse and validate ``path``; keyword ``overrides`` (from CLI flags) win.

    Overrides set to None are ignored.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep label names as written
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent

    def get(section, key, default=None):
        if cp.has_option(section, key):
            return cp.get(section, key).strip()
        return default

    def geti(section, key, default):
        v = get(section, key)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer, got {v!r}") from exc

    if not cp.has_section("labels"):
        raise ConfigError(f"{path}: missing [labels] section")
    try:
        labels = LabelDictionary({int(k): v for k, v in cp.items("labels")})
    except ValueError as exc:
        raise ConfigError(f"{path}: bad [labels] section ({exc})") from exc

    seed = get("run", "seed")
    if seed is None and overrides.get("seed") is None:
        raise ConfigError(f"{path}: [run] seed is mandatory")
    registry = get("run", "registry")
    if registry is None:
        raise ConfigError(f"{path}: [run] registry is required")
    reg_b = get("cohort", "registry_b")
    datasets = get("cohort", "datasets")
    if datasets is not None:
        names = tuple(d.strip() for d in datasets.split(","))
        if len(names) != 2:
            raise ConfigError("[cohort] datasets must name exactly two datasets")
        datasets = names

    cfg = RunConfig(
        labels=labels,
        registry=base / registry,
        experiment=get("run", "experiment", "sex"),
        seed=geti("run", "seed", 0),
        dataset=get("run", "dataset", ""),
        train_size=geti("cohort", "train_size", 0),
        test_size=geti("cohort", "test_size", 0),
        folds=geti("cohort", "folds", 5),
        age_under=geti("cohort", "age_under", 50),
        age_over=geti("cohort", "age_over", 70),
        age_bin_years=geti("cohort", "age_bin_years", 10),
        datasets=datasets,
        registry_b=base / reg_b if reg_b else None,
        g1_filter=_filter(get("cohort", "g1_filter", "")),
        g2_filter=_filter(get("cohort", "g2_filter", "")),
        percentile=get("metrics", "percentile", "nearest_rank_95"),
        ttest=get("metrics", "ttest", "paired"),
        output_dir=base / get("run", "output_dir", "out"),
        source=path,
    )
    clean = {k: v for k, v in overrides.items() if v is not None}
    if "output_dir" in clean:
        clean["output_dir"] = Path(clean["output_dir"])
    return replace(cfg, **clean).validate()

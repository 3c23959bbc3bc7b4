import os

import hypothesis
import numpy as np
import pytest

from popshift import phantom
from popshift.volume_io import LabelDictionary

hypothesis.settings.register_profile("default", max_examples=60, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=500, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TWO_ORGANS = LabelDictionary({1: "right kidney", 2: "left kidney"})


@pytest.fixture
def two_organs():
    return TWO_ORGANS


@pytest.fixture
def two_organ_phantom():
    spec = phantom.PhantomSpec(
        (24, 20, 18),
        (1.5, 1.5, 2.0),
        (
            phantom.Ellipsoid(1, (7.0, 10.0, 9.0), (4.0, 5.0, 3.5)),
            phantom.Ellipsoid(2, (17.0, 9.5, 8.0), (3.0, 4.0, 5.0)),
        ),
        subject_id="case01",
    )
    return phantom.generate_volume(spec)


def cube(shape, lo, size):
    m = np.zeros(shape, dtype=bool)
    m[lo[0] : lo[0] + size, lo[1] : lo[1] + size, lo[2] : lo[2] + size] = True
    return m


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        print(line)
        ACCEPTANCE_LINES.append(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

"""The acceptance suite: every criterion at its stated tolerance, at the pinned seed.

Each test prints one PASS/FAIL line (shown even without ``-s``).
"""
from __future__ import annotations

import time

import pytest

from dflab import acceptance

NAMES = list(acceptance.CRITERIA)


@pytest.mark.slow
@pytest.mark.parametrize("name", NAMES)
def test_criterion(name, capsys):
    t = time.perf_counter()
    row = acceptance.CRITERIA[name](seed=acceptance.SEED, workers=1)
    row["seconds"] = time.perf_counter() - t
    line = acceptance.format_row(NAMES.index(name) + 1, row)
    with capsys.disabled():
        print("\n" + line)
    assert row["pass"], line


def test_criteria_are_complete():
    assert len(NAMES) == 11
    assert NAMES[0] == "tail-mass" and NAMES[-1] == "solver-selftest"

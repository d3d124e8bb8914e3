import os

import numpy as np
import pytest


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SRWCR_PAPER_SCALE") == "1":
        return
    skip = pytest.mark.skip(reason="paper-scale run; set SRWCR_PAPER_SCALE=1")
    for item in items:
        if "paper_scale" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one ``criterion N: PASS|FAIL detail`` line for the terminal summary."""

    def record(criterion, ok, detail):
        ACCEPTANCE.append((criterion, "PASS" if ok else "FAIL", detail))
        return ok

    return record


SKIPPED = {
    "1": "paper-scale run not requested (set SRWCR_PAPER_SCALE=1)",
    "9": "needs external DIR-lab data (set SRWCR_DIRLAB to the case directory)",
}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    seen = {str(c) for c, _, _ in ACCEPTANCE}
    rows = list(ACCEPTANCE) + [(c, "SKIP", why) for c, why in SKIPPED.items() if c not in seen]
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in sorted(rows, key=lambda r: str(r[0])):
        terminalreporter.write_line(f"criterion {criterion}: {status}  {detail}")

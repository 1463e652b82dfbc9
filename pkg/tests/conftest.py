import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion id -> (description, {part: (passed, detail)}); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record(cid, description, passed, detail="", part=""):
    """Register one checked part of a criterion; passed=None marks a skip."""
    ACCEPTANCE.setdefault(cid, (description, {}))[1][part] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: (int(c.rstrip("ab")), c)):
        desc, parts = ACCEPTANCE[cid]
        outcomes = [p for p, _ in parts.values()]
        if any(p is False for p in outcomes):
            status = "FAIL"
        elif all(p is None for p in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        details = "; ".join(f"{k + ': ' if k else ''}{d}" for k, (_, d) in parts.items() if d)
        terminalreporter.write_line(f"{status}  criterion {cid}: {desc}"
                                    + (f"  [{details}]" if details else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

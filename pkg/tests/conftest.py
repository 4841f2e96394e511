import numpy as np
import pytest

from hopmixer.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


def rel_err(a, b, floor=1.0):
    """Max abs difference scaled by the larger of ``floor`` and the reference magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(floor, float(np.max(np.abs(b)))))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, with the measured values it recorded."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::")[-1]
            number = int(name.split("_")[2])
            detail = dict(rep.user_properties).get("measured", "")
            lines.append((number, f"criterion {number:2d}: {'PASS' if rep.passed else 'FAIL'}  {name}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

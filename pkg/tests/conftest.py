import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CRITERIA = {
    1: "guidance special cases",
    2: "composite score vs tilted log-density",
    3: "score oracle fidelity",
    4: "forward process moments",
    5: "unconditional sampling soundness",
    6: "realism ordering",
    7: "reverse-DDIM round trip",
    8: "condition schedule suite",
    9: "AdaGN scalar equality",
    10: "determinism",
}

_outcomes = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: long-running statistical test")


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        for n in getattr(report, "criteria", ()):
            _outcomes[n].append(report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report.criteria = tuple(m.args[0] for m in item.iter_markers("criterion"))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _outcomes:
            continue
        ok = all(_outcomes[n])
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)

import time
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, settings

from cavsafe.scenario import load_preset
from cavsafe.sim import run

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SEC5_SEEDS = range(20)


@pytest.fixture(scope="session")
def sec5_config():
    return load_preset("paper-sec5")


@pytest.fixture(scope="session")
def sec5_runs(sec5_config):
    """paper-sec5 over 20 seeds, with wall-clock time per run."""
    out = {}
    for seed in SEC5_SEEDS:
        tic = time.perf_counter()
        log = run(replace(sec5_config, seed=seed))
        out[seed] = (log, time.perf_counter() - tic)
    return out


ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"acceptance {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

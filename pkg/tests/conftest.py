import pytest

from coreaging.config import ExperimentConfig

# Filled in by test_acceptance.py; printed once at the end of the session.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.split()[0].rstrip("abcd")), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def small_config():
    """Two machines of eight cores, fast enough for engine unit tests."""
    return ExperimentConfig().updated(
        cluster={"machines": 2, "cores_per_vm": 8},
        workload={"rates": [10.0], "duration_s": 3.0},
        aging_time_scale=1000.0,
    )

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pdmkit.schedule import make_schedule

settings.register_profile("pdm", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pdm")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}")


@pytest.fixture
def two_step():
    """Linear T=2 schedule with beta = (0.5, 0.5)."""
    return make_schedule("linear", 2, beta_start=0.5, beta_end=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

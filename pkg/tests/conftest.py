import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ietagc.diffusion import Architecture, build_schedule, init_params

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_arch():
    """Small enough for finite differences: 2 + 4 inputs, hidden (8, 8), 2 outputs."""
    return Architecture(d=2, T=10, emb_dim=4, hidden=(8, 8))


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(tiny_arch, seed=3)


@pytest.fixture
def schedule10():
    return build_schedule(10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed once at the end of the session
ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE[number] = line
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])

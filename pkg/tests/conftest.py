import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from blindisac.core import OfdmConfig, SourceParams

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def desk():
    return OfdmConfig.desk_grid()


@pytest.fixture
def small():
    return OfdmConfig(16, 16, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def three_sources(cfg):
    """Reference scene with three well separated sources."""
    return (SourceParams.from_physical(20, 15, 8, 1.0, cfg),
            SourceParams.from_physical(80, -20, -5, 0.9, cfg),
            SourceParams.from_physical(50, 0, 0, 1.0, cfg))


def asym_apsk():
    """Fixed asymmetric 4+12 APSK (cheap stand-in for an optimized design)."""
    from blindisac.design import ApskGeometry, realize

    pert = np.zeros(16)
    pert[[4, 9, 13]] = (0.12, -0.15, 0.09)
    pert[1] = 0.2
    return realize(ApskGeometry((4, 12), (1.0, 2.57), (np.pi / 4, 0.0), tuple(pert)), label="asym")


# acceptance verdicts, printed in the terminal summary
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])

import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("forge", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("forge")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_pass_warnings():
    from forge.passes import PassWarning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PassWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS):
        terminalreporter.write_line(line)

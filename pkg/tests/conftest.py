import logging

import numpy as np
import pytest

from DualBranchINS.eskf import FilterConfig
from DualBranchINS.nav_core import NavState
from DualBranchINS_harness.trajectory import ImuErrorSpec, gen_synthetic

PACKAGE_LOGGERS = ("DualBranchINS", "DualBranchINS_harness")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: statistical or long-running checks")


@pytest.fixture(autouse=True)
def _restore_package_loggers():
    # the CLI installs its own handlers; undo that so caplog keeps working
    yield
    for name in PACKAGE_LOGGERS:
        package_logger = logging.getLogger(name)
        for handler in list(package_logger.handlers):
            package_logger.removeHandler(handler)
            handler.close()
        package_logger.setLevel(logging.NOTSET)
        package_logger.propagate = True


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def cfg():
    return FilterConfig()


@pytest.fixture
def level_state():
    return NavState.from_euler(v_ned=(10.0, 0.0, 0.0))


@pytest.fixture(scope="session")
def clean_circuit():
    return gen_synthetic("circuit", duration=60.0, rate=100.0, seed=3)


@pytest.fixture(scope="session")
def short_hilly():
    errors = ImuErrorSpec(accel_bias=(0.05,) * 3, gyro_bias=(2e-4,) * 3, accel_density=0.005, gyro_density=5e-4)
    return gen_synthetic("hilly", duration=20.0, rate=50.0, imu_errors=errors, seed=11)

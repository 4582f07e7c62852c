import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import pytest
from hypothesis import HealthCheck, settings

from bdfqed.dressed_dirac import PhysicalParams, dress

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def params():
    return PhysicalParams(0.02, 1e3)


@pytest.fixture(scope="session")
def dressed(params):
    return dress(params)


@pytest.fixture(scope="session")
def renorm(dressed, params):
    from bdfqed.vacuum_polarization import assemble

    return assemble(dressed, params)

import warnings

import numpy as np
import pytest
from hypothesis import settings

from propeller_lab import phantom, trajectory

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_truth():
    return phantom.make_phantom(phantom.PhantomSpec.random(64, seed=3))


@pytest.fixture(scope="session")
def desk_maps():
    return phantom.make_coil_maps(8, 64)


def quiet_traj(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return trajectory.gen_propeller(*args, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

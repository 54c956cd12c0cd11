import sys

import numpy as np
import pytest

from bemdtn.operators import assemble
from bemdtn.shapes import icosphere
from bemdtn.steklov import DtNOperator, steklov_eigs


@pytest.fixture(scope="session")
def ico2():
    return icosphere(2)


@pytest.fixture(scope="session")
def ico3():
    return icosphere(3)


@pytest.fixture(scope="session")
def ops2(ico2):
    return assemble(ico2)


@pytest.fixture(scope="session")
def ops3(ico3):
    return assemble(ico3)


@pytest.fixture(scope="session")
def dtn2(ops2, ico2):
    return DtNOperator(ops2, ico2)


@pytest.fixture(scope="session")
def dtn3(ops3, ico3):
    return DtNOperator(ops3, ico3)


@pytest.fixture(scope="session")
def sphere_spectrum(dtn3):
    """Seventeen smallest Steklov pairs of the 642-vertex unit icosphere."""
    return steklov_eigs(dtn3, 17, tol=1e-6, seed=0)


@pytest.fixture(scope="session")
def sphere16_spectrum(dtn2):
    """Complete eigenspaces up to degree 3 on the 162-vertex icosphere."""
    return steklov_eigs(dtn2, 16, tol=1e-6, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])

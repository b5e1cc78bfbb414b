import numpy as np
import pytest

from doseinfer.basis import SobolevBasis
from doseinfer.estimators import build_workspace
from doseinfer.simulation import DgpConfig, gen_data
from doseinfer.sup_test import DEFAULT_MARGIN, TestConfig


@pytest.fixture(scope="session")
def basis():
    return SobolevBasis(20, margin=DEFAULT_MARGIN)


@pytest.fixture(scope="session")
def setting1_data():
    return gen_data(DgpConfig(1, 500, 11))


@pytest.fixture(scope="session")
def setting2_data():
    return gen_data(DgpConfig(2, 500, 12))


@pytest.fixture(scope="session")
def small_data():
    return gen_data(DgpConfig(2, 200, 13))


@pytest.fixture(scope="session")
def setting1_fit(setting1_data, basis):
    nuisance = TestConfig().fit_nuisance(setting1_data)
    return nuisance, build_workspace(setting1_data, nuisance, basis)


@pytest.fixture(scope="session")
def setting2_fit(setting2_data, basis):
    nuisance = TestConfig().fit_nuisance(setting2_data)
    return nuisance, build_workspace(setting2_data, nuisance, basis)


@pytest.fixture(scope="session")
def small_fit(small_data, basis):
    nuisance = TestConfig().fit_nuisance(small_data)
    return nuisance, build_workspace(small_data, nuisance, basis)


def random_qcqp(rng, D):
    """Random instance with a well-conditioned V and a diagonal Gamma."""
    X = rng.standard_normal((4 * D, D))
    V = X.T @ X / (4 * D)
    Gamma = np.diag(np.sort(rng.uniform(0.5, 50.0, D)))
    U = rng.standard_normal(D)
    return U, V, Gamma


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import pytest

from eptissue import cell_static, fem
from eptissue.mesh import build_unit_cell
from eptissue.model import ModelParams


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def mesh04():
    return build_unit_cell(0.04, 0.25)


@pytest.fixture(scope="session")
def mesh02():
    return build_unit_cell(0.02, 0.25)


@pytest.fixture(scope="session")
def system02(mesh02, params):
    return fem.assemble(mesh02, params.sigma_c, params.sigma_e)


@pytest.fixture(scope="session")
def fact02(system02):
    return fem.factorize(system02)


@pytest.fixture(scope="session")
def correctors02(fact02, system02):
    c = cell_static.compute_correctors(fact02)
    cell_static.effective_A(c, system02)
    return c

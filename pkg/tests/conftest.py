import numpy as np
import pytest

from mfpmp.models import ModelSpec
from mfpmp.ode import TimeGrid
from mfpmp.population import PopulationSpec

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def zero_model(d=1, phi=None, phi_x=None, m=1):
    """f = 0 and L = 0; terminal loss defaults to 0.5 |x - y|^2."""

    def zeros_state(x, theta):
        return np.zeros(np.broadcast_shapes(x.shape[:-1], theta.shape[:-1]) + (d,))

    def zeros_scalar(x, theta):
        return np.zeros(np.broadcast_shapes(x.shape[:-1], theta.shape[:-1]))

    return ModelSpec(
        name="zero", d=d, l=d, m=m,
        f=zeros_state,
        f_x=lambda x, th: np.zeros(np.broadcast_shapes(x.shape[:-1], th.shape[:-1]) + (d, d)),
        f_theta=lambda x, th: np.zeros(np.broadcast_shapes(x.shape[:-1], th.shape[:-1]) + (d, m)),
        L=zeros_scalar,
        L_x=zeros_state,
        L_theta=lambda x, th: np.zeros(np.broadcast_shapes(x.shape[:-1], th.shape[:-1]) + (m,)),
        phi=phi or (lambda x, y: 0.5 * np.sum((x - y) ** 2, axis=-1)),
        phi_x=phi_x or (lambda x, y: x - y),
        hess_theta_H=np.zeros((m, m)),
    )


@pytest.fixture
def lq_atom():
    return PopulationSpec([[0.0]], [[1.0]], [1.0])


@pytest.fixture
def unit_grid():
    return TimeGrid(1.0, 20)

import numpy as np
import pytest

from gridflex.model import LoadClass, SupplierModel, TimeGrid, Trajectory, Unit


def make_grid(horizon_hours=24.0, step_minutes=5.0):
    return TimeGrid(horizon_hours=horizon_hours, step_minutes=step_minutes)


def make_class(
    grid,
    name="pool_pumps",
    alpha=0.0,
    capacity=6.0,
    cost_scale=4.0e4,
    cost_degree=8,
    baseline_gw=1.5,
    dev_max_gw=None,
    x0=0.0,
):
    """Load class with flat baseline and turn-off-only lower bound."""
    n = grid.n_steps
    baseline = Trajectory(grid, np.full(n, baseline_gw), Unit.GW)
    dev_min = Trajectory(grid, -baseline.values, Unit.GW)
    if dev_max_gw is None:
        dev_max_gw = baseline_gw
    dev_max = Trajectory(grid, np.full(n, dev_max_gw), Unit.GW)
    return LoadClass(
        name=name,
        alpha=alpha,
        capacity=capacity,
        cost_scale=cost_scale,
        cost_degree=cost_degree,
        baseline=baseline,
        dev_min=dev_min,
        dev_max=dev_max,
        x0=x0,
    )


def make_supplier(a0=0.0, a1=20.0, a2=0.4, b=0.05, g_min=0.0, g_max=150.0, g0=40.0):
    return SupplierModel(
        gen_cost_coeffs=(a0, a1, a2),
        ramp_cost_coeff=b,
        g_min=g_min,
        g_max=g_max,
        g0=g0,
    )


@pytest.fixture
def grid24():
    return make_grid()


@pytest.fixture
def grid_small():
    return make_grid(horizon_hours=1.0, step_minutes=15.0)

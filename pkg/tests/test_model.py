"""Unit tests for the domain types, SoC dynamics and cost functionals."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridflex.errors import GridMismatchError, UnitMismatchError, ValidationError
from gridflex.model import (
    LoadClass,
    SupplierModel,
    TimeGrid,
    Trajectory,
    Unit,
    eval_demand_utility,
    eval_supplier_utility,
    integrate_soc,
    qos_cost,
    qos_cost_prime,
)

from conftest import make_class, make_grid, make_supplier


# ---------------------------------------------------------------- time grid

def test_grid_basic_properties():
    grid = TimeGrid(horizon_hours=24.0, step_minutes=5.0)
    assert grid.n_steps == 288
    assert grid.dt_hours == pytest.approx(1.0 / 12.0)
    assert grid.times()[0] == 0.0
    assert grid.times()[-1] == pytest.approx(24.0 - 1.0 / 12.0)


def test_grid_rejects_non_dividing_step():
    with pytest.raises(ValidationError):
        TimeGrid(horizon_hours=24.0, step_minutes=7.0)


def test_grid_rejects_single_step():
    with pytest.raises(ValidationError):
        TimeGrid(horizon_hours=1.0, step_minutes=60.0)


def test_trajectory_length_and_finiteness():
    grid = make_grid(1.0, 15.0)
    with pytest.raises(GridMismatchError):
        Trajectory(grid, np.zeros(5), Unit.GW)
    with pytest.raises(ValidationError):
        Trajectory(grid, np.array([0.0, np.inf, 0.0, 0.0]), Unit.GW)


def test_trajectory_values_are_read_only():
    grid = make_grid(1.0, 15.0)
    traj = Trajectory.constant(grid, 1.0, Unit.GW)
    with pytest.raises(ValueError):
        traj.values[0] = 2.0


# ------------------------------------------------------------- SoC dynamics

def test_integrate_soc_zero_input_zero_state(grid24):
    cls = make_class(grid24, alpha=0.5)
    x = integrate_soc(cls, Trajectory.constant(grid24, 0.0, Unit.GW))
    assert x.unit == Unit.SOC
    np.testing.assert_array_equal(x.values, 0.0)


def test_integrate_soc_pure_integrator(grid24):
    cls = make_class(grid24, alpha=0.0, x0=0.25)
    c = 0.8
    x = integrate_soc(cls, Trajectory.constant(grid24, c, Unit.GW))
    k = np.arange(grid24.n_steps)
    np.testing.assert_allclose(x.values, 0.25 + c * k * grid24.dt_hours, rtol=1e-12)


def test_integrate_soc_matches_closed_form_linear_ode(grid24):
    # constant input: x(t) = (d/alpha)(1 - exp(-alpha t)); the exponential
    # update reproduces it exactly at the sample points
    alpha = 0.5
    cls = make_class(grid24, alpha=alpha, capacity=10.0)
    x = integrate_soc(cls, Trajectory.constant(grid24, 1.0, Unit.GW))
    t = grid24.times()
    np.testing.assert_allclose(x.values, (1.0 / alpha) * (1.0 - np.exp(-alpha * t)), rtol=1e-12)
    assert x.values[-1] == pytest.approx(2.0, abs=2e-5)


def test_integrate_soc_exact_on_refined_grid_for_piecewise_constant_input():
    coarse = make_grid(4.0, 30.0)
    fine = make_grid(4.0, 15.0)
    rng = np.random.default_rng(3)
    dev_coarse = rng.uniform(-1.0, 1.0, coarse.n_steps)
    dev_fine = np.repeat(dev_coarse, 2)
    cls_c = make_class(coarse, alpha=0.7, x0=0.3, baseline_gw=2.0)
    cls_f = make_class(fine, alpha=0.7, x0=0.3, baseline_gw=2.0)
    x_c = integrate_soc(cls_c, Trajectory(coarse, dev_coarse, Unit.GW))
    x_f = integrate_soc(cls_f, Trajectory(fine, dev_fine, Unit.GW))
    np.testing.assert_allclose(x_f.values[::2], x_c.values, rtol=1e-12, atol=1e-14)


def test_integrate_soc_rejects_grid_mismatch(grid24):
    cls = make_class(grid24)
    other = make_grid(24.0, 10.0)
    with pytest.raises(GridMismatchError):
        integrate_soc(cls, Trajectory.constant(other, 0.0, Unit.GW))


def test_integrate_soc_rejects_price_unit(grid24):
    cls = make_class(grid24)
    with pytest.raises(UnitMismatchError):
        integrate_soc(cls, Trajectory.constant(grid24, 0.0, Unit.PRICE))


# ----------------------------------------------------------------- QoS cost

def test_qos_cost_zero_at_origin(grid24):
    cls = make_class(grid24)
    assert qos_cost(cls, 0.0) == 0.0


def test_qos_cost_reaches_scale_at_capacity(grid24):
    cls = make_class(grid24, capacity=1.0, cost_scale=100.0, cost_degree=8)
    assert qos_cost(cls, 1.0) == pytest.approx(100.0)
    assert qos_cost(cls, -1.0) == pytest.approx(100.0)


@settings(max_examples=200)
@given(x=st.floats(-50, 50, allow_nan=False))
def test_qos_cost_even_symmetry(x):
    cls = make_class(make_grid(1.0, 30.0), capacity=3.0, cost_scale=7.0, cost_degree=6)
    assert qos_cost(cls, x) == pytest.approx(qos_cost(cls, -x), rel=1e-12)


@settings(max_examples=200)
@given(
    x=st.floats(-20, 20, allow_nan=False),
    y=st.floats(-20, 20, allow_nan=False),
    theta=st.floats(0, 1, allow_nan=False),
)
def test_qos_cost_convexity(x, y, theta):
    cls = make_class(make_grid(1.0, 30.0), capacity=4.0, cost_scale=11.0, cost_degree=8)
    lhs = qos_cost(cls, theta * x + (1 - theta) * y)
    rhs = theta * qos_cost(cls, x) + (1 - theta) * qos_cost(cls, y)
    assert lhs <= rhs * (1 + 1e-12) + 1e-12


def test_qos_cost_prime_matches_finite_difference(grid24):
    cls = make_class(grid24, capacity=2.0, cost_scale=500.0, cost_degree=8)
    for x in (-1.9, -0.7, 0.3, 1.2):
        h = 1e-6
        fd = (qos_cost(cls, x + h) - qos_cost(cls, x - h)) / (2 * h)
        assert qos_cost_prime(cls, x) == pytest.approx(fd, rel=1e-6, abs=1e-9)


# ----------------------------------------------------------- demand utility

def test_demand_utility_zero_baseline(grid24):
    classes = [make_class(grid24, name="a", alpha=0.3), make_class(grid24, name="b")]
    devs = [Trajectory.constant(grid24, 0.0, Unit.GW)] * 2
    assert eval_demand_utility(classes, devs) == 0.0


def test_demand_utility_three_step_hand_sum():
    grid = make_grid(1.5, 30.0)
    cls = make_class(grid, alpha=0.4, capacity=2.0, cost_scale=10.0, cost_degree=4, x0=0.1)
    dev = Trajectory(grid, np.array([0.5, -0.2, 0.9]), Unit.GW)

    # independent literal evaluation of the sum
    dt = 0.5
    a = math.exp(-0.4 * dt)
    beta = (1 - a) / 0.4
    x = [0.1]
    for k in range(2):
        x.append(a * x[-1] + beta * dev.values[k])
    expected = -sum(10.0 * (xi / 2.0) ** 4 for xi in x) * dt

    assert eval_demand_utility([cls], [dev]) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(1.0, 10.0), seed=st.integers(0, 2**16))
def test_demand_utility_never_increases_when_soc_scales_up(scale, seed):
    grid = make_grid(2.0, 15.0)
    cls = make_class(grid, alpha=0.0, capacity=3.0, baseline_gw=1.0, x0=0.0)
    rng = np.random.default_rng(seed)
    dev = rng.uniform(-1.0, 1.0, grid.n_steps)
    base = eval_demand_utility([cls], [Trajectory(grid, dev, Unit.GW)])
    scaled = eval_demand_utility([cls], [Trajectory(grid, scale * dev, Unit.GW)])
    assert scaled <= base + 1e-12


# --------------------------------------------------------- supplier utility

def test_supplier_utility_no_cost_terms(grid24):
    supplier = make_supplier(a0=0.0, a1=0.0, a2=0.0, b=0.7, g0=5.0)
    g = Trajectory.constant(grid24, 5.0, Unit.GW)
    assert eval_supplier_utility(supplier, g) == 0.0


def test_supplier_utility_quadratic_only(grid24):
    # c_g(g) = g^2, g = 2 for 24 h: cost = 4 * 24 = 96
    supplier = make_supplier(a0=0.0, a1=0.0, a2=1.0, b=0.0, g0=2.0)
    g = Trajectory.constant(grid24, 2.0, Unit.GW)
    assert eval_supplier_utility(supplier, g) == pytest.approx(-96.0, rel=1e-12)


def test_supplier_utility_ramp_free_when_constant(grid24):
    g = Trajectory.constant(grid24, 30.0, Unit.GW)
    with_ramp = eval_supplier_utility(make_supplier(b=9.0, g0=30.0), g)
    without = eval_supplier_utility(make_supplier(b=0.0, g0=30.0), g)
    assert with_ramp == pytest.approx(without, rel=1e-12)


def test_supplier_utility_counts_initial_ramp():
    grid = make_grid(1.0, 30.0)
    supplier = make_supplier(a0=0.0, a1=0.0, a2=0.0, b=2.0, g0=1.0)
    g = Trajectory(grid, np.array([2.0, 2.0]), Unit.GW)
    # one ramp of (2-1)/0.5 = 2 GW/h in the first step: cost = 2 * 2^2 * 0.5
    assert eval_supplier_utility(supplier, g) == pytest.approx(-4.0, rel=1e-12)


def test_supplier_utility_rejects_bound_violation(grid24):
    supplier = make_supplier(g_min=0.0, g_max=10.0, g0=5.0)
    g = Trajectory.constant(grid24, 11.0, Unit.GW)
    with pytest.raises(ValidationError):
        eval_supplier_utility(supplier, g)


# ------------------------------------------------------------- domain types

def test_load_class_validation(grid24):
    with pytest.raises(ValidationError):
        make_class(grid24, alpha=-0.1)
    with pytest.raises(ValidationError):
        make_class(grid24, capacity=0.0)
    with pytest.raises(ValidationError):
        make_class(grid24, cost_degree=3)


def test_load_class_rejects_shed_beyond_baseline(grid24):
    n = grid24.n_steps
    baseline = Trajectory.constant(grid24, 1.0, Unit.GW)
    dev_min = Trajectory.constant(grid24, -2.0, Unit.GW)
    dev_max = Trajectory.constant(grid24, 1.0, Unit.GW)
    with pytest.raises(ValidationError):
        LoadClass(
            name="bad",
            alpha=0.0,
            capacity=1.0,
            cost_scale=1.0,
            cost_degree=2,
            baseline=baseline,
            dev_min=dev_min,
            dev_max=dev_max,
        )


def test_supplier_validation():
    with pytest.raises(ValidationError):
        SupplierModel(gen_cost_coeffs=(0, 0, -1), ramp_cost_coeff=0, g_min=0, g_max=1, g0=0)
    with pytest.raises(ValidationError):
        SupplierModel(gen_cost_coeffs=(0, 0, 1), ramp_cost_coeff=0, g_min=0, g_max=1, g0=2)

"""Domain types and cost functionals for the flexibility model.

Conventions used throughout the package:

* powers in GW, prices in $/MWh (numerically equal to k$/GWh), time in
  hours; a price times a power is therefore a cost rate in k$/h and all
  cost/utility integrals come out in k$.
* aggregate state of charge (SoC) x of a load class follows the linear
  leakage dynamics  dx/dt = -alpha * x + d,  where d is the power
  deviation from baseline. Positive deviation charges the SoC.
* trajectories are uniformly sampled, one value per step, piecewise
  constant over [t_k, t_k + dt).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import GridMismatchError, UnitMismatchError, ValidationError

__all__ = [
    "Unit",
    "TimeGrid",
    "Trajectory",
    "LoadClass",
    "SupplierModel",
    "Scenario",
    "integrate_soc",
    "qos_cost",
    "qos_cost_prime",
    "eval_demand_utility",
    "eval_supplier_utility",
]


class Unit(str, enum.Enum):
    """Unit tag carried by every trajectory."""

    GW = "GW"
    SOC = "SoC"
    PRICE = "currency-per-MWh"
    DIMENSIONLESS = "dimensionless"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of the optimization horizon.

    The step must divide the horizon exactly and leave at least two steps.
    """

    horizon_hours: float
    step_minutes: float

    def __post_init__(self):
        if not (math.isfinite(self.horizon_hours) and self.horizon_hours > 0):
            raise ValidationError(f"horizon_hours must be positive, got {self.horizon_hours}")
        if not (math.isfinite(self.step_minutes) and self.step_minutes > 0):
            raise ValidationError(f"step_minutes must be positive, got {self.step_minutes}")
        ratio = self.horizon_hours * 60.0 / self.step_minutes
        n = round(ratio)
        if abs(ratio - n) > 1e-9 * max(1.0, ratio):
            raise ValidationError(
                f"step of {self.step_minutes} min does not divide {self.horizon_hours} h exactly"
            )
        if n < 2:
            raise ValidationError(f"grid needs at least 2 steps, got {n}")

    @property
    def n_steps(self) -> int:
        return round(self.horizon_hours * 60.0 / self.step_minutes)

    @property
    def dt_hours(self) -> float:
        return self.step_minutes / 60.0

    def times(self) -> np.ndarray:
        """Left endpoints of the sampling intervals, in hours."""
        return np.arange(self.n_steps) * self.dt_hours

    def index_of(self, t_hours: float) -> int:
        """Index of the step whose interval contains ``t_hours``."""
        if t_hours < 0 or t_hours > self.horizon_hours + 1e-12:
            raise ValidationError(f"time {t_hours} h outside horizon {self.horizon_hours} h")
        return min(int(t_hours / self.dt_hours + 1e-9), self.n_steps - 1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled time series with a unit tag."""

    grid: TimeGrid
    values: np.ndarray
    unit: Unit

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.unit == other.unit
            and np.array_equal(self.values, other.values)
        )

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 1 or arr.shape[0] != self.grid.n_steps:
            raise GridMismatchError(
                f"expected {self.grid.n_steps} samples, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValidationError("trajectory contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "unit", Unit(self.unit))

    @classmethod
    def constant(cls, grid: TimeGrid, value: float, unit: Unit) -> "Trajectory":
        return cls(grid, np.full(grid.n_steps, float(value)), unit)

    def with_values(self, values) -> "Trajectory":
        return Trajectory(self.grid, values, self.unit)

    def __len__(self) -> int:
        return self.grid.n_steps


def require_grid(traj: Trajectory, grid: TimeGrid, what: str = "trajectory"):
    if traj.grid != grid:
        raise GridMismatchError(f"{what} is on a different time grid")


def require_unit(traj: Trajectory, unit: Unit, what: str = "trajectory"):
    if traj.unit != unit:
        raise UnitMismatchError(f"{what} has unit {traj.unit.value}, expected {unit.value}")


@dataclass(frozen=True)
class LoadClass:
    """One aggregated flexible-load population (a virtual battery).

    ``cost_scale`` is the QoS violation cost rate (k$/h) incurred when the
    SoC magnitude reaches ``capacity``; in between the cost follows an even
    polynomial of degree ``cost_degree``, nearly flat in the interior and
    steep at the walls.
    """

    name: str
    alpha: float
    capacity: float
    cost_scale: float
    cost_degree: int
    baseline: Trajectory
    dev_min: Trajectory
    dev_max: Trajectory
    x0: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise ValidationError("load class needs a name")
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValidationError(f"{self.name}: leakage rate must be >= 0, got {self.alpha}")
        if not (math.isfinite(self.capacity) and self.capacity > 0):
            raise ValidationError(f"{self.name}: capacity must be > 0, got {self.capacity}")
        if not (math.isfinite(self.cost_scale) and self.cost_scale >= 0):
            raise ValidationError(f"{self.name}: cost_scale must be >= 0")
        degree = int(self.cost_degree)
        if degree != self.cost_degree or degree < 2 or degree % 2 != 0:
            raise ValidationError(
                f"{self.name}: cost_degree must be an even integer >= 2, got {self.cost_degree}"
            )
        object.__setattr__(self, "cost_degree", degree)
        if not math.isfinite(self.x0):
            raise ValidationError(f"{self.name}: x0 must be finite")
        grid = self.baseline.grid
        require_grid(self.dev_min, grid, f"{self.name} dev_min")
        require_grid(self.dev_max, grid, f"{self.name} dev_max")
        for traj, what in ((self.baseline, "baseline"), (self.dev_min, "dev_min"), (self.dev_max, "dev_max")):
            require_unit(traj, Unit.GW, f"{self.name} {what}")
        if np.any(self.baseline.values < 0):
            raise ValidationError(f"{self.name}: baseline power must be non-negative")
        if np.any(self.dev_min.values > 0) or np.any(self.dev_max.values < 0):
            raise ValidationError(f"{self.name}: deviation bounds must satisfy dev_min <= 0 <= dev_max")
        if np.any(self.dev_min.values < -self.baseline.values - 1e-12):
            raise ValidationError(f"{self.name}: dev_min may not shed more than the baseline")

    @property
    def grid(self) -> TimeGrid:
        return self.baseline.grid

    def decay_factor(self, dt_hours: float) -> float:
        """Per-step SoC retention exp(-alpha*dt)."""
        return math.exp(-self.alpha * dt_hours)

    def input_gain(self, dt_hours: float) -> float:
        """Per-step gain on a held deviation, (1 - exp(-alpha*dt))/alpha."""
        if self.alpha == 0.0:
            return dt_hours
        return -math.expm1(-self.alpha * dt_hours) / self.alpha


@dataclass(frozen=True)
class SupplierModel:
    """Single dispatchable supplier class with convex fuel and ramp costs.

    Fuel cost c_g(g) = a0 + a1*g + a2*g^2 (k$/h at g in GW); ramping cost
    c_d(gdot) = b * gdot^2 with gdot in GW/h.
    """

    gen_cost_coeffs: tuple[float, float, float]
    ramp_cost_coeff: float
    g_min: float
    g_max: float
    g0: float

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.gen_cost_coeffs)
        if len(coeffs) != 3 or not all(math.isfinite(c) for c in coeffs):
            raise ValidationError("gen_cost_coeffs must be three finite numbers (a0, a1, a2)")
        if coeffs[2] < 0:
            raise ValidationError("quadratic fuel-cost coefficient must be >= 0")
        object.__setattr__(self, "gen_cost_coeffs", coeffs)
        if not (math.isfinite(self.ramp_cost_coeff) and self.ramp_cost_coeff >= 0):
            raise ValidationError("ramp_cost_coeff must be >= 0")
        if not (self.g_min <= self.g0 <= self.g_max):
            raise ValidationError(
                f"initial output {self.g0} outside bounds [{self.g_min}, {self.g_max}]"
            )

    def gen_cost(self, g):
        a0, a1, a2 = self.gen_cost_coeffs
        g = np.asarray(g, dtype=float)
        return a0 + a1 * g + a2 * g * g

    def gen_cost_prime(self, g):
        a0, a1, a2 = self.gen_cost_coeffs
        return a1 + 2.0 * a2 * np.asarray(g, dtype=float)

    def ramp_cost(self, gdot):
        gdot = np.asarray(gdot, dtype=float)
        return self.ramp_cost_coeff * gdot * gdot

    def ramp_cost_prime(self, gdot):
        return 2.0 * self.ramp_cost_coeff * np.asarray(gdot, dtype=float)


@dataclass(frozen=True)
class Scenario:
    """A complete problem instance on one time grid."""

    grid: TimeGrid
    inflexible_load: Trajectory
    classes: tuple[LoadClass, ...]
    supplier: SupplierModel
    exogenous_price: Trajectory | None = None
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        require_grid(self.inflexible_load, self.grid, "inflexible load")
        require_unit(self.inflexible_load, Unit.GW, "inflexible load")
        for cls in self.classes:
            require_grid(cls.baseline, self.grid, f"class {cls.name}")
        if self.exogenous_price is not None:
            require_grid(self.exogenous_price, self.grid, "exogenous price")
            require_unit(self.exogenous_price, Unit.PRICE, "exogenous price")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def total_baseline(self) -> np.ndarray:
        """Sum of class baselines P^b_sigma, GW."""
        if not self.classes:
            return np.zeros(self.grid.n_steps)
        return np.sum([cls.baseline.values for cls in self.classes], axis=0)

    def net_baseline_load(self) -> np.ndarray:
        """Inflexible load plus total flexible baseline, GW."""
        return self.inflexible_load.values + self.total_baseline()


def soc_path(decay: float, gain: float, x0: float, dev: np.ndarray) -> np.ndarray:
    """SoC samples under the exact discretization of the leakage ODE.

    x[0] = x0 and x[k+1] = decay * x[k] + gain * dev[k]; dev is held
    constant over each step, making the update exact rather than an Euler
    approximation. The final deviation sample only affects state beyond
    the horizon and so does not appear in the returned path.
    """
    n = dev.shape[0]
    x = np.empty(n)
    x[0] = x0
    if n > 1:
        # IIR filter y[k] = gain*dev[k] + decay*y[k-1] with y[-1] = x0
        x[1:] = lfilter([gain], [1.0, -decay], dev[:-1], zi=np.array([decay * x0]))[0]
    return x


def adjoint_sum(decay: float, terms: np.ndarray) -> np.ndarray:
    """Backward recursion s[k] = terms[k] + decay * s[k+1], s[n] = 0."""
    rev = lfilter([1.0], [1.0, -decay], terms[::-1])
    return rev[::-1]


def integrate_soc(load_class: LoadClass, dev: Trajectory) -> Trajectory:
    """Integrate the leakage dynamics for one class under a deviation.

    Positive deviation charges the SoC. Uses the exact exponential update,
    which reduces to pure integration x[k+1] = x[k] + dt*dev[k] when the
    leakage rate is zero.
    """
    require_grid(dev, load_class.grid, "deviation")
    if dev.unit not in (Unit.GW, Unit.DIMENSIONLESS):
        raise UnitMismatchError(f"deviation has unit {dev.unit.value}, expected GW")
    dt = load_class.grid.dt_hours
    x = soc_path(load_class.decay_factor(dt), load_class.input_gain(dt), load_class.x0, dev.values)
    return Trajectory(load_class.grid, x, Unit.SOC)


def qos_cost(load_class: LoadClass, x):
    """QoS violation cost rate kappa * (x/C)^(2p), k$/h.

    Even, convex, zero at the origin and equal to ``cost_scale`` at
    |x| = capacity.
    """
    ratio = np.asarray(x, dtype=float) / load_class.capacity
    return load_class.cost_scale * ratio ** load_class.cost_degree


def qos_cost_prime(load_class: LoadClass, x):
    """Derivative of :func:`qos_cost` with respect to the SoC."""
    c = load_class.capacity
    p = load_class.cost_degree
    ratio = np.asarray(x, dtype=float) / c
    return load_class.cost_scale * p / c * ratio ** (p - 1)


def eval_demand_utility(classes, devs) -> float:
    """Aggregate consumer utility: negative total QoS cost over the horizon.

    Left-Riemann sum of the per-class cost rates along the SoC paths
    induced by the given deviations.
    """
    classes = tuple(classes)
    devs = tuple(devs)
    if len(classes) != len(devs):
        raise ValidationError(f"{len(classes)} classes but {len(devs)} deviation trajectories")
    total = 0.0
    for cls, dev in zip(classes, devs):
        x = integrate_soc(cls, dev)
        total += float(np.sum(qos_cost(cls, x.values))) * cls.grid.dt_hours
    return -total


def eval_supplier_utility(supplier: SupplierModel, g: Trajectory) -> float:
    """Supplier utility: negative fuel-plus-ramping cost of an output path.

    The first ramp is taken from the initial output ``g0``. Output must
    stay within the supplier's bounds.
    """
    require_unit(g, Unit.GW, "generation")
    vals = g.values
    tol = 1e-9 * max(1.0, abs(supplier.g_max), abs(supplier.g_min))
    if np.any(vals < supplier.g_min - tol) or np.any(vals > supplier.g_max + tol):
        raise ValidationError("generation violates supplier output bounds")
    dt = g.grid.dt_hours
    gdot = np.diff(vals, prepend=supplier.g0) / dt
    cost = np.sum(supplier.gen_cost(vals)) + np.sum(supplier.ramp_cost(gdot))
    return -float(cost) * dt

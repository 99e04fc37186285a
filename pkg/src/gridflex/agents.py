"""Best responses of price-taking agents and the critical-peak-price experiment.

Every agent solves a smooth convex program over box-bounded trajectories.
The load-side state recursion is substituted into the objective so the
only decision variables are the deviation samples; gradients are computed
by an adjoint backward pass. Solvers are gradient-projection based
(L-BFGS-B with a spectral projected-gradient polish), so the whole module
stays first-order and interior-point free.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import Bounds, minimize

from .errors import SolverError, ValidationError
from .model import (
    LoadClass,
    Scenario,
    SupplierModel,
    TimeGrid,
    Trajectory,
    Unit,
    adjoint_sum,
    qos_cost,
    qos_cost_prime,
    require_grid,
    require_unit,
    soc_path,
)

__all__ = [
    "BestResponse",
    "CppEvent",
    "CppExperimentReport",
    "aggregator_best_response",
    "supplier_best_response",
    "run_cpp_experiment",
]

MAX_ITER_DEFAULT = 50_000
KKT_TOL_DEFAULT = 1e-6


@dataclass(frozen=True)
class BestResponse:
    """Optimal trajectory of one agent at a fixed price.

    Exactly one of ``dev`` (aggregator) or ``gen`` (supplier) is set.
    ``objective`` is the achieved value of the agent's maximization problem
    and ``kkt_residual`` the normalized first-order optimality residual.
    """

    objective: float
    solver_iters: int
    kkt_residual: float
    dev: Trajectory | None = None
    gen: Trajectory | None = None

    def __post_init__(self):
        if (self.dev is None) == (self.gen is None):
            raise ValidationError("BestResponse carries either a deviation or a generation profile")


@dataclass(frozen=True)
class CppEvent:
    """One critical-peak-pricing window: price uplifted by a fixed fraction.

    The tariff is two-level: ``base_price`` outside the window and
    ``base_price * (1 + uplift_fraction)`` inside it.
    """

    start_hours: float
    duration_hours: float = 1.5
    uplift_fraction: float = 0.10
    base_price: float = 40.0

    def __post_init__(self):
        if not (math.isfinite(self.start_hours) and self.start_hours >= 0):
            raise ValidationError("event start must be non-negative")
        if not (math.isfinite(self.duration_hours) and self.duration_hours > 0):
            raise ValidationError("event duration must be positive")
        # the no-op uplift is allowed so a zero-event run degenerates cleanly
        if not (math.isfinite(self.uplift_fraction) and self.uplift_fraction >= 0):
            raise ValidationError("uplift fraction must be >= 0")
        if not (math.isfinite(self.base_price) and self.base_price >= 0):
            raise ValidationError("base price must be >= 0")

    def window(self, grid: TimeGrid) -> np.ndarray:
        """Boolean mask of steps whose interval start lies in the event."""
        if self.start_hours + self.duration_hours > grid.horizon_hours + 1e-9:
            raise ValidationError("event extends past the horizon")
        t = grid.times()
        return (t >= self.start_hours - 1e-9) & (t < self.start_hours + self.duration_hours - 1e-9)


# ----------------------------------------------------------------- solvers

def _box_kkt_residual(x, grad, lo, hi, scale):
    """Max complementarity violation of min f s.t. lo <= x <= hi, over scale.

    Interior points must have zero gradient; at an active bound only the
    gradient component pushing outwards counts as a violation.
    """
    span = np.maximum(hi - lo, 1e-30)
    eps = 1e-9 * np.maximum(span, 1.0)
    at_lo = x <= lo + eps
    at_hi = x >= hi - eps
    viol = np.abs(grad)
    viol = np.where(at_lo, np.maximum(0.0, -grad), viol)
    viol = np.where(at_hi & ~at_lo, np.maximum(0.0, grad), viol)
    return float(np.max(viol)) / scale if viol.size else 0.0


def _spg_polish(fun, x, lo, hi, scale, tol, max_iter):
    """Barzilai-Borwein projected-gradient polish of a near-solution.

    Function values near the optimum change below machine precision while
    the analytic gradient stays exact, so the iteration is driven purely by
    gradients and the best iterate by KKT residual is returned.
    """
    f, g = fun(x)
    kkt = _box_kkt_residual(x, g, lo, hi, scale)
    best = (kkt, x, f, g)
    # spectral probe for the initial step
    gn = np.linalg.norm(g)
    if gn > 0:
        h = 1e-7 * max(1.0, np.linalg.norm(x)) / gn
        _, g_probe = fun(np.clip(x - h * g, lo, hi))
        curv = np.linalg.norm(g_probe - g) / (h * gn)
        step = 1.0 / max(curv, 1e-12)
    else:
        step = 1.0
    iters = 0
    for _ in range(max_iter):
        if best[0] <= tol:
            break
        x_new = np.clip(x - step * g, lo, hi)
        if not np.any(x_new != x):
            break
        f_new, g_new = fun(x_new)
        iters += 1
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        x, f, g = x_new, f_new, g_new
        step = float(s @ s) / sy if sy > 0 else step * 2.0
        step = min(max(step, 1e-14), 1e14)
        kkt = _box_kkt_residual(x, g, lo, hi, scale)
        if kkt < best[0]:
            best = (kkt, x, f, g)
    return best[1], best[2], best[3], iters


def _minimize_box(fun, x0, lo, hi, scale, tol, max_iter):
    """Minimize a smooth convex function over a box to a KKT tolerance.

    Returns (x, value, grad, total_iterations, kkt_residual). Raises
    :class:`SolverError` carrying the best iterate when the tolerance is
    not met within the iteration budget.
    """
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    total = 0
    best = None
    for attempt in range(2):
        res = minimize(
            fun,
            x,
            jac=True,
            method="L-BFGS-B",
            bounds=Bounds(lo, hi),
            options={
                "maxiter": max_iter,
                "maxfun": 2 * max_iter,
                "ftol": 1e-18,
                "gtol": 0.1 * tol * scale,
                "maxcor": 30,
            },
        )
        x = np.clip(res.x, lo, hi)
        total += res.nit
        f, g = fun(x)
        kkt = _box_kkt_residual(x, g, lo, hi, scale)
        best = (x, f, g)
        if kkt <= tol:
            return x, f, g, total, kkt
        if total >= max_iter:
            break
    # first-order polish pass for the stubborn residuals
    x, f, g, it = _spg_polish(fun, best[0], lo, hi, scale, tol, min(3_000, max(0, max_iter - total)))
    total += it
    kkt = _box_kkt_residual(x, g, lo, hi, scale)
    if kkt > tol:
        raise SolverError(
            f"box-constrained solve stalled at KKT residual {kkt:.3e} (tol {tol:.1e})",
            best=(x, f, g, kkt),
            iters=total,
            residual=kkt,
        )
    return x, f, g, total, kkt


class AggregatorObjective:
    """Discounted-state objective of one load class at a fixed price.

    Minimization form: sum_k [qos_cost(x_k) + price_k * d_k] * dt with the
    SoC recursion substituted in. ``value_and_grad`` returns the objective
    and its exact adjoint gradient.
    """

    def __init__(self, load_class: LoadClass, price_values: np.ndarray):
        self.cls = load_class
        self.price = np.asarray(price_values, dtype=float)
        grid = load_class.grid
        self.dt = grid.dt_hours
        self.decay = load_class.decay_factor(self.dt)
        self.gain = load_class.input_gain(self.dt)
        self.lo = load_class.dev_min.values
        self.hi = load_class.dev_max.values
        self.scale = self.dt * max(1.0, float(np.max(np.abs(self.price))))

    def soc(self, d: np.ndarray) -> np.ndarray:
        return soc_path(self.decay, self.gain, self.cls.x0, d)

    def value_and_grad(self, d: np.ndarray):
        x = self.soc(d)
        value = self.dt * (float(np.sum(qos_cost(self.cls, x))) + float(self.price @ d))
        cp = qos_cost_prime(self.cls, x)
        s = adjoint_sum(self.decay, cp)
        grad = self.price.copy()
        grad[:-1] += self.gain * s[1:]
        grad *= self.dt
        return value, grad


class SupplierObjective:
    """Fuel-plus-ramp cost net of revenue for the supplier at a fixed price.

    Minimization form: sum_k [c_g(g_k) + c_d((g_k - g_{k-1})/dt) - price_k g_k] * dt
    with the pre-horizon output fixed at ``g0``.
    """

    def __init__(self, supplier: SupplierModel, price_values: np.ndarray, dt: float):
        self.sup = supplier
        self.price = np.asarray(price_values, dtype=float)
        self.dt = dt
        n = self.price.shape[0]
        self.lo = np.full(n, supplier.g_min)
        self.hi = np.full(n, supplier.g_max)
        self.scale = dt * max(1.0, float(np.max(np.abs(self.price))))

    def value_and_grad(self, g: np.ndarray):
        sup = self.sup
        gdot = np.diff(g, prepend=sup.g0) / self.dt
        value = self.dt * (
            float(np.sum(sup.gen_cost(g)))
            + float(np.sum(sup.ramp_cost(gdot)))
            - float(self.price @ g)
        )
        rp = sup.ramp_cost_prime(gdot)
        grad = self.dt * (sup.gen_cost_prime(g) - self.price)
        grad += rp
        grad[:-1] -= rp[1:]
        return value, grad

    def start_point(self) -> np.ndarray:
        """Pointwise marginal-cost dispatch, ignoring ramps."""
        a0, a1, a2 = self.sup.gen_cost_coeffs
        if a2 > 0:
            g = (self.price - a1) / (2.0 * a2)
        else:
            g = np.where(self.price > a1, self.hi, self.lo)
        return np.clip(g, self.lo, self.hi)


def aggregator_best_response(
    load_class: LoadClass,
    price: Trajectory,
    tol: float = KKT_TOL_DEFAULT,
    max_iter: int = MAX_ITER_DEFAULT,
    start: np.ndarray | None = None,
) -> BestResponse:
    """Deviation profile maximizing QoS utility minus the deviation bill.

    Starts from the baseline profile (zero deviation), which also fixes the
    tie at exact indifference: unpriced intervals stay at baseline while any
    positive price pushes storage-like classes onto their shed bound.
    """
    require_grid(price, load_class.grid, "price")
    require_unit(price, Unit.PRICE, "price")
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    prob = AggregatorObjective(load_class, price.values)
    if np.any(prob.lo > prob.hi):
        raise ValidationError(f"{load_class.name}: empty deviation box")
    x0 = np.zeros(load_class.grid.n_steps) if start is None else start
    try:
        d, f, _, iters, kkt = _minimize_box(
            prob.value_and_grad, x0, prob.lo, prob.hi, prob.scale, tol, max_iter
        )
    except SolverError as err:
        d, f, _, kkt = err.best
        best = BestResponse(
            objective=-f, solver_iters=err.iters, kkt_residual=kkt,
            dev=Trajectory(load_class.grid, d, Unit.GW),
        )
        raise SolverError(
            f"{load_class.name}: {err}", best=best, iters=err.iters, residual=kkt
        ) from None
    return BestResponse(
        objective=-f,
        solver_iters=iters,
        kkt_residual=kkt,
        dev=Trajectory(load_class.grid, d, Unit.GW),
    )


def supplier_best_response(
    supplier: SupplierModel,
    price: Trajectory,
    tol: float = KKT_TOL_DEFAULT,
    max_iter: int = MAX_ITER_DEFAULT,
    start: np.ndarray | None = None,
) -> BestResponse:
    """Generation profile maximizing revenue minus fuel and ramping cost."""
    require_unit(price, Unit.PRICE, "price")
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    prob = SupplierObjective(supplier, price.values, price.grid.dt_hours)
    x0 = prob.start_point() if start is None else start
    try:
        g, f, _, iters, kkt = _minimize_box(
            prob.value_and_grad, x0, prob.lo, prob.hi, prob.scale, tol, max_iter
        )
    except SolverError as err:
        g, f, _, kkt = err.best
        best = BestResponse(
            objective=-f, solver_iters=err.iters, kkt_residual=kkt,
            gen=Trajectory(price.grid, g, Unit.GW),
        )
        raise SolverError(
            f"supplier: {err}", best=best, iters=err.iters, residual=kkt
        ) from None
    return BestResponse(
        objective=-f,
        solver_iters=iters,
        kkt_residual=kkt,
        gen=Trajectory(price.grid, g, Unit.GW),
    )


# ----------------------------------------------------- peak-price experiment

@dataclass
class CppExperimentReport:
    """Aggregate outcome of a critical-peak-pricing run."""

    price: Trajectory
    responses: dict[str, BestResponse]
    baseline_total: Trajectory
    flexible_total: Trajectory
    pre_bound_surge_gw: float
    onset_drop_gw: float
    off_durations_min: dict[str, float]
    failed: dict[str, SolverError] = field(default_factory=dict)


def _off_duration_minutes(cls: LoadClass, dev: np.ndarray, window: np.ndarray, dt_hours: float) -> float:
    """Contiguous minutes from event onset during which the class is fully shed."""
    idx = np.flatnonzero(window)
    minutes = 0.0
    for k in idx:
        lo = cls.dev_min.values[k]
        if lo >= -1e-12:  # nothing to shed at this step
            break
        if dev[k] <= lo + 0.02 * (-lo):
            minutes += dt_hours * 60.0
        else:
            break
    return minutes


def run_cpp_experiment(
    scenario: Scenario,
    event: CppEvent,
    tol: float = KKT_TOL_DEFAULT,
    max_iter: int = MAX_ITER_DEFAULT,
    threads: int = 1,
) -> CppExperimentReport:
    """Optimal response of every load class to a critical-peak-price event.

    The two-level tariff is rebuilt from the event. Because each baseline
    profile is by definition the consumption pattern already adopted under
    the flat tariff, best responses are computed against the price uplift
    relative to that tariff; with a zero uplift every class therefore stays
    exactly at baseline.

    Raises :class:`SolverError` carrying the partial report if any class
    fails to converge.
    """
    if scenario.exogenous_price is None:
        raise ValidationError("scenario is not in exogenous-price mode")
    if not scenario.classes:
        raise ValidationError("peak-price experiment needs at least one load class")
    grid = scenario.grid
    window = event.window(grid)
    full_price = np.where(window, event.base_price * (1.0 + event.uplift_fraction), event.base_price)
    uplift_price = Trajectory(grid, full_price - event.base_price, Unit.PRICE)

    def solve(cls):
        return aggregator_best_response(cls, uplift_price, tol=tol, max_iter=max_iter)

    responses: dict[str, BestResponse] = {}
    failed: dict[str, SolverError] = {}
    if threads > 1 and len(scenario.classes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {cls.name: pool.submit(solve, cls) for cls in scenario.classes}
            for name, fut in futures.items():
                try:
                    responses[name] = fut.result()
                except SolverError as err:
                    failed[name] = err
    else:
        for cls in scenario.classes:
            try:
                responses[cls.name] = solve(cls)
            except SolverError as err:
                failed[cls.name] = err

    baseline_total = scenario.total_baseline()
    flexible_total = baseline_total.copy()
    for cls in scenario.classes:
        if cls.name in responses:
            flexible_total += responses[cls.name].dev.values

    start_idx = int(np.argmax(window)) if window.any() else 0
    surge = flexible_total - baseline_total
    pre_surge = float(np.max(surge[:start_idx])) if start_idx > 0 else 0.0
    # one-step decrease of total flexible power at onset, net of baseline drift
    onset_drop = float(surge[start_idx - 1] - surge[start_idx]) if start_idx > 0 else 0.0

    off_durations = {
        cls.name: _off_duration_minutes(cls, responses[cls.name].dev.values, window, grid.dt_hours)
        for cls in scenario.classes
        if cls.name in responses
    }

    report = CppExperimentReport(
        price=Trajectory(grid, full_price, Unit.PRICE),
        responses=responses,
        baseline_total=Trajectory(grid, baseline_total, Unit.GW),
        flexible_total=Trajectory(grid, flexible_total, Unit.GW),
        pre_bound_surge_gw=pre_surge,
        onset_drop_gw=onset_drop,
        off_durations_min=off_durations,
        failed=failed,
    )
    if failed:
        names = ", ".join(sorted(failed))
        raise SolverError(f"best response failed for: {names}", best=report)
    return report

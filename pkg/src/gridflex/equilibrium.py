"""Social planner's problem, dual price discovery, and equilibrium checks.

The supply=demand constraint g = inflexible + baseline + total deviation is
priced by a multiplier trajectory. Relaxing it decomposes the planner's
problem into one supplier subproblem and M independent load-class
subproblems (the agents module), plus a linear term; the dual optimum is
the competitive-equilibrium price. Two solution paths are provided:

* :func:`solve_spp` - an augmented-Lagrangian method of multipliers on the
  joint primal, whose multiplier sequence performs dual ascent on a
  smoothed dual. Robust workhorse with a certified duality gap.
* :func:`find_equilibrium_price` - quasi-Newton ascent directly on the
  decomposed dual, returning the agents' own best responses at the final
  price together with the same weak-duality certificate.

Both certificates evaluate the true decomposed dual at the returned price,
so a reported gap is honest regardless of the path taken.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agents import (
    AggregatorObjective,
    SupplierObjective,
    _box_kkt_residual,
    _minimize_box,
    aggregator_best_response,
    supplier_best_response,
)
from .errors import InfeasibleScenarioError, SolverError, ValidationError
from .model import (
    Scenario,
    Trajectory,
    Unit,
    adjoint_sum,
    integrate_soc,
    qos_cost,
    qos_cost_prime,
    require_grid,
    require_unit,
    soc_path,
)

__all__ = [
    "EquilibriumSolution",
    "MarginalValueReport",
    "solve_spp",
    "dual_function",
    "find_equilibrium_price",
    "check_marginal_value",
    "check_feasibility",
]


@dataclass
class EquilibriumSolution:
    """Primal-dual solution of the planner's problem.

    ``duality_gap`` is the absolute gap between the feasible primal value
    and the decomposed dual value at ``price`` (k$ over the horizon);
    ``balance_residual`` is the max supply=demand violation in GW of the
    returned trajectories.
    """

    price: Trajectory
    gen: Trajectory
    devs: dict[str, Trajectory]
    socs: dict[str, Trajectory]
    duality_gap: float
    relative_gap: float
    balance_residual: float
    iters: int
    primal_value: float
    dual_value: float
    method: str
    log: list[tuple[int, float, float]] = field(default_factory=list)


@dataclass
class MarginalValueReport:
    """Residuals of the QoS-marginal-cost / price identity for one class.

    At interior optima the marginal QoS cost equals alpha*price - d(price)/dt;
    the residual is reported in units of the class's marginal cost at
    capacity. ``residuals`` is NaN outside the interior mask.
    """

    name: str
    residuals: np.ndarray
    max_norm: float
    rms_norm: float
    n_interior: int


def check_feasibility(scenario: Scenario):
    """Verify the balance constraint admits a feasible point at every step.

    Raises :class:`InfeasibleScenarioError` listing the violating steps.
    """
    load = scenario.net_baseline_load()
    lo_dev = np.zeros(scenario.grid.n_steps)
    hi_dev = np.zeros(scenario.grid.n_steps)
    for cls in scenario.classes:
        lo_dev += cls.dev_min.values
        hi_dev += cls.dev_max.values
    lo_need = load + lo_dev
    hi_need = load + hi_dev
    sup = scenario.supplier
    bad = (lo_need > sup.g_max + 1e-9) | (hi_need < sup.g_min - 1e-9)
    if np.any(bad):
        idx = np.flatnonzero(bad)
        raise InfeasibleScenarioError(
            f"balance infeasible at {idx.size} steps (first at index {idx[0]}): "
            f"required output outside supplier bounds",
            indices=idx,
        )


def _class_order(scenario: Scenario) -> list:
    return list(scenario.classes)


def _marginal_cost_price(scenario: Scenario) -> np.ndarray:
    """Supplier marginal cost at the net baseline load: the dual warm start."""
    g = np.clip(scenario.net_baseline_load(), scenario.supplier.g_min, scenario.supplier.g_max)
    return np.asarray(scenario.supplier.gen_cost_prime(g), dtype=float)


# ------------------------------------------------------------ dual function

def _dual_eval(scenario, lam_values, sub_tol, max_iter, warm):
    """Decomposed dual value, residual and subproblem solutions at a price.

    Best-effort: a subproblem that stalls short of ``sub_tol`` contributes
    its best feasible iterate, whose value error is far below the gap
    tolerances certified from this evaluation.
    """
    grid = scenario.grid
    dt = grid.dt_hours
    lam = Trajectory(grid, lam_values, Unit.PRICE)

    def best_effort(solver, *args, key):
        try:
            resp = solver(*args, lam, tol=sub_tol, max_iter=max_iter, start=warm.get(key))
        except SolverError as err:
            resp = err.best
        return resp

    g_resp = best_effort(supplier_best_response, scenario.supplier, key="__supplier__")
    warm["__supplier__"] = g_resp.gen.values
    value = -g_resp.objective  # supplier subproblem minimum
    d_sigma = np.zeros(grid.n_steps)
    devs = {}
    for cls in scenario.classes:
        resp = best_effort(aggregator_best_response, cls, key=cls.name)
        warm[cls.name] = resp.dev.values
        devs[cls.name] = resp.dev.values
        value += -resp.objective
        d_sigma += resp.dev.values
    load = scenario.net_baseline_load()
    value += dt * float(lam_values @ load)
    residual = load + d_sigma - g_resp.gen.values
    return value, residual, g_resp.gen.values, devs


def dual_function(
    scenario: Scenario,
    lam: Trajectory,
    sub_tol: float = 1e-9,
    max_iter: int = 50_000,
) -> tuple[float, Trajectory]:
    """Evaluate the decomposed dual at a price trajectory.

    Returns the dual value (k$) and its subgradient, the supply=demand
    residual inflexible + baseline + deviation - generation in GW.
    """
    require_grid(lam, scenario.grid, "price")
    require_unit(lam, Unit.PRICE, "price")
    value, residual, _, _ = _dual_eval(scenario, lam.values, sub_tol, max_iter, {})
    return value, Trajectory(scenario.grid, residual, Unit.GW)


# ------------------------------------------------------ augmented Lagrangian

class _AugmentedLagrangian:
    """Joint primal objective with the balance constraint augmented."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        grid = scenario.grid
        self.n = grid.n_steps
        self.dt = grid.dt_hours
        self.load = scenario.net_baseline_load()
        self.classes = _class_order(scenario)
        self.m = len(self.classes)
        dt = self.dt
        self.decay = np.array([c.decay_factor(dt) for c in self.classes])
        self.gain = np.array([c.input_gain(dt) for c in self.classes])
        sup = scenario.supplier
        n = self.n
        self.lo = np.concatenate(
            [np.full(n, sup.g_min)] + [c.dev_min.values for c in self.classes]
        )
        self.hi = np.concatenate(
            [np.full(n, sup.g_max)] + [c.dev_max.values for c in self.classes]
        )

    def split(self, z):
        g = z[: self.n]
        devs = [z[self.n * (i + 1) : self.n * (i + 2)] for i in range(self.m)]
        return g, devs

    def residual(self, z):
        g, devs = self.split(z)
        d_sigma = np.sum(devs, axis=0) if devs else np.zeros(self.n)
        return self.load + d_sigma - g

    def primal_cost(self, g, devs):
        sup = self.scenario.supplier
        dt = self.dt
        gdot = np.diff(g, prepend=sup.g0) / dt
        cost = float(np.sum(sup.gen_cost(g))) + float(np.sum(sup.ramp_cost(gdot)))
        for cls, d, a, b in zip(self.classes, devs, self.decay, self.gain):
            x = soc_path(a, b, cls.x0, d)
            cost += float(np.sum(qos_cost(cls, x)))
        return cost * dt

    def value_and_grad(self, z, lam, mu):
        sup = self.scenario.supplier
        dt = self.dt
        g, devs = self.split(z)
        r = self.load - g
        for d in devs:
            r += d

        gdot = np.diff(g, prepend=sup.g0) / dt
        value = float(np.sum(sup.gen_cost(g))) + float(np.sum(sup.ramp_cost(gdot)))
        price_like = lam + mu * r  # multiplier estimate at this iterate
        value += float(lam @ r) + 0.5 * mu * float(r @ r)

        rp = sup.ramp_cost_prime(gdot)
        grad_g = np.asarray(sup.gen_cost_prime(g), dtype=float) - price_like
        grad_g *= dt
        grad_g += rp
        grad_g[:-1] -= rp[1:]

        grads = [grad_g]
        for cls, d, a, b in zip(self.classes, devs, self.decay, self.gain):
            x = soc_path(a, b, cls.x0, d)
            value += float(np.sum(qos_cost(cls, x)))
            s = adjoint_sum(a, qos_cost_prime(cls, x))
            grad_d = price_like.copy()
            grad_d[:-1] += b * s[1:]
            grad_d *= dt
            grads.append(grad_d)
        return value * dt, np.concatenate(grads)


class _ReducedPrimal:
    """Planner objective with generation eliminated through the balance.

    Valid whenever the implied generation keeps strictly inside its bounds;
    decision variables are the class deviations only, so the box structure
    is preserved and a single solve suffices.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        grid = scenario.grid
        self.n = grid.n_steps
        self.dt = grid.dt_hours
        self.load = scenario.net_baseline_load()
        self.classes = _class_order(scenario)
        self.m = len(self.classes)
        dt = self.dt
        self.decay = np.array([c.decay_factor(dt) for c in self.classes])
        self.gain = np.array([c.input_gain(dt) for c in self.classes])
        self.lo = (
            np.concatenate([c.dev_min.values for c in self.classes])
            if self.classes
            else np.zeros(0)
        )
        self.hi = (
            np.concatenate([c.dev_max.values for c in self.classes])
            if self.classes
            else np.zeros(0)
        )

    def split(self, z):
        return [z[self.n * i : self.n * (i + 1)] for i in range(self.m)]

    def gen_of(self, z):
        devs = self.split(z)
        d_sigma = np.sum(devs, axis=0) if devs else np.zeros(self.n)
        return self.load + d_sigma, devs

    def value_and_grad(self, z):
        sup = self.scenario.supplier
        dt = self.dt
        g, devs = self.gen_of(z)
        gdot = np.diff(g, prepend=sup.g0) / dt
        value = float(np.sum(sup.gen_cost(g))) + float(np.sum(sup.ramp_cost(gdot)))
        rp = sup.ramp_cost_prime(gdot)
        grad_sup = np.asarray(sup.gen_cost_prime(g), dtype=float) * dt
        grad_sup += rp
        grad_sup[:-1] -= rp[1:]

        grads = []
        for cls, d, a, b in zip(self.classes, devs, self.decay, self.gain):
            x = soc_path(a, b, cls.x0, d)
            value += float(np.sum(qos_cost(cls, x)))
            s = adjoint_sum(a, qos_cost_prime(cls, x))
            grad_d = grad_sup.copy()
            grad_d[:-1] += dt * b * s[1:]
            grads.append(grad_d)
        return value * dt, np.concatenate(grads) if grads else np.zeros(0)

    def price_from_generation(self, g):
        """Multiplier via supplier stationarity at an interior output path."""
        sup = self.scenario.supplier
        gdot = np.diff(g, prepend=sup.g0) / self.dt
        rp = np.asarray(sup.ramp_cost_prime(gdot), dtype=float)
        lam = np.asarray(sup.gen_cost_prime(g), dtype=float)
        lam += rp / self.dt
        lam[:-1] -= rp[1:] / self.dt
        return lam


def _feasible_recovery(prob: _AugmentedLagrangian, z):
    """Project onto exact balance by regenerating g from the deviations."""
    g, devs = prob.split(z)
    sup = prob.scenario.supplier
    d_sigma = np.sum(devs, axis=0) if devs else np.zeros(prob.n)
    g_f = np.clip(prob.load + d_sigma, sup.g_min, sup.g_max)
    residual = float(np.max(np.abs(prob.load + d_sigma - g_f)))
    return g_f, devs, residual


def _package_solution(scenario, lam, g, devs, gap, rel_gap, residual, iters,
                      primal, dual, method, log):
    grid = scenario.grid
    dev_trajs = {}
    soc_trajs = {}
    for cls, d in zip(scenario.classes, devs):
        traj = Trajectory(grid, d, Unit.GW)
        dev_trajs[cls.name] = traj
        soc_trajs[cls.name] = integrate_soc(cls, traj)
    return EquilibriumSolution(
        price=Trajectory(grid, lam, Unit.PRICE),
        gen=Trajectory(grid, g, Unit.GW),
        devs=dev_trajs,
        socs=soc_trajs,
        duality_gap=gap,
        relative_gap=rel_gap,
        balance_residual=residual,
        iters=iters,
        primal_value=primal,
        dual_value=dual,
        method=method,
        log=log,
    )


def solve_spp(
    scenario: Scenario,
    tol: float = 1e-6,
    max_outer: int = 60,
    max_iter: int = 50_000,
) -> EquilibriumSolution:
    """Minimize total generation, ramping and QoS cost subject to balance.

    The balance equality is eliminated by expressing generation as net load
    plus total deviation, leaving one box-constrained convex program over
    the deviations; the price is recovered from supplier stationarity and
    certified against the decomposed dual (weak duality), so the reported
    gap is valid regardless of how the solution was produced. If the
    implied generation path presses against its bounds, the solver falls
    back to an augmented-Lagrangian method of multipliers on the full
    variable set.
    """
    if scenario.exogenous_price is not None:
        raise ValidationError("planner's problem expects no exogenous price")
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    check_feasibility(scenario)

    direct = _solve_spp_direct(scenario, tol, max_iter)
    if direct is not None:
        return direct
    return _solve_spp_al(scenario, tol, max_outer, max_iter)


def _solve_spp_direct(scenario, tol, max_iter):
    """Balance-eliminated primal solve; None if generation bounds interfere."""
    prob = _ReducedPrimal(scenario)
    sup = scenario.supplier
    peak = max(1e-9, float(np.max(np.abs(prob.load))))
    tol_bal = tol * peak
    price_scale = max(1.0, float(np.max(np.abs(_marginal_cost_price(scenario)))))
    g_margin = 1e-9 * max(1.0, sup.g_max - sup.g_min)

    log: list[tuple[int, float, float]] = []
    warm: dict = {}
    total_iters = 0

    if prob.m == 0:
        g = prob.load.copy()
        if np.any(g < sup.g_min - g_margin) or np.any(g > sup.g_max + g_margin):
            return None
        z = np.zeros(0)
        devs = []
    else:
        z = np.zeros(prob.m * prob.n)
        inner_tol = max(1e-9, 2.0 * tol)
        for round_ in range(3):
            try:
                z, _, _, it, _ = _minimize_box(
                    prob.value_and_grad, z, prob.lo, prob.hi,
                    prob.dt * price_scale, inner_tol, max_iter,
                )
            except SolverError as err:
                z, it = err.best[0], err.iters
            total_iters += it
            g, devs = prob.gen_of(z)
            if np.any(g < sup.g_min + g_margin) or np.any(g > sup.g_max - g_margin):
                return None
            lam = prob.price_from_generation(g)
            primal, _ = prob.value_and_grad(z)
            dual_val, _, _, _ = _dual_eval(scenario, lam, max(1e-9, 0.1 * tol), max_iter, warm)
            gap = primal - dual_val
            rel_gap = gap / max(1.0, abs(primal))
            log.append((round_, rel_gap, 0.0))
            if rel_gap <= tol:
                break
            inner_tol = max(1e-12, 0.1 * inner_tol)
        else:
            return None  # certification failed; try the multiplier method
        return _package_solution(
            scenario, lam, g, devs, max(0.0, gap), rel_gap, 0.0,
            total_iters, primal, dual_val, "reduced-primal", log,
        )

    # no flexible classes: generation is pinned to the load
    lam = prob.price_from_generation(g)
    primal = prob.value_and_grad(z)[0] if prob.m else _fixed_gen_cost(scenario, g)
    dual_val, _, _, _ = _dual_eval(scenario, lam, max(1e-9, 0.1 * tol), max_iter, warm)
    gap = primal - dual_val
    rel_gap = gap / max(1.0, abs(primal))
    if rel_gap > tol:
        return None
    return _package_solution(
        scenario, lam, g, [], max(0.0, gap), rel_gap, 0.0,
        total_iters, primal, dual_val, "reduced-primal", log,
    )


def _fixed_gen_cost(scenario, g):
    sup = scenario.supplier
    dt = scenario.grid.dt_hours
    gdot = np.diff(g, prepend=sup.g0) / dt
    return (float(np.sum(sup.gen_cost(g))) + float(np.sum(sup.ramp_cost(gdot)))) * dt


def _solve_spp_al(scenario, tol, max_outer, max_iter):
    """Method of multipliers over the joint (generation, deviation) box."""
    prob = _AugmentedLagrangian(scenario)
    peak = max(1e-9, float(np.max(np.abs(prob.load))))
    tol_bal = tol * peak
    price_scale = max(1.0, float(np.max(np.abs(_marginal_cost_price(scenario)))))

    lam = _marginal_cost_price(scenario)
    a2 = scenario.supplier.gen_cost_coeffs[2]
    mu = max(1.0, 4.0 * a2)
    z = np.clip(np.concatenate([prob.load] + [np.zeros(prob.n)] * prob.m), prob.lo, prob.hi)

    warm: dict = {}
    log: list[tuple[int, float, float]] = []
    total_iters = 0
    best = None
    r_norm_prev = np.inf
    for outer in range(max_outer):
        # inner accuracy tightens with the outer progress
        inner_tol = max(2.0 * tol, min(1e-4, 10.0 ** (-(outer + 3))))
        scale = prob.dt * max(1.0, price_scale + mu * max(1.0, r_norm_prev if np.isfinite(r_norm_prev) else 1.0))
        try:
            z, _, _, it, _ = _minimize_box(
                lambda v: prob.value_and_grad(v, lam, mu),
                z, prob.lo, prob.hi, scale, inner_tol, max_iter,
            )
        except SolverError as err:
            z = err.best[0]
            it = err.iters
        total_iters += it

        r = prob.residual(z)
        r_norm = float(np.max(np.abs(r)))
        lam = lam + mu * r

        # the duality certificate is only worth buying near feasibility
        if r_norm <= max(100.0 * tol_bal, 1e-4 * peak):
            g_f, devs, residual_f = _feasible_recovery(prob, z)
            primal = prob.primal_cost(g_f, devs)
            dual_val, _, _, _ = _dual_eval(scenario, lam, max(1e-9, 0.1 * tol), max_iter, warm)
            gap = primal - dual_val
            rel_gap = gap / max(1.0, abs(primal))
            log.append((outer, rel_gap, r_norm))
            if best is None or rel_gap < best[0]:
                best = (rel_gap, lam.copy(), g_f, [d.copy() for d in devs], gap, residual_f, primal, dual_val)
            if rel_gap <= tol and residual_f <= tol_bal and r_norm <= tol_bal:
                break
        else:
            log.append((outer, float("inf"), r_norm))
        if r_norm > 0.25 * r_norm_prev:
            mu = min(mu * 10.0, 1e12)
        r_norm_prev = r_norm
    else:
        if best is None:
            g_f, devs, residual_f = _feasible_recovery(prob, z)
            best = (float("inf"), lam.copy(), g_f, devs, float("inf"), residual_f,
                    prob.primal_cost(g_f, devs), float("-inf"))
        rel_gap, lam_b, g_b, devs_b, gap_b, res_b, primal_b, dual_b = best
        raise SolverError(
            f"planner solve did not certify gap <= {tol:.1e} "
            f"(best relative gap {rel_gap:.3e}, residual {res_b:.3e} GW)",
            best=_package_solution(scenario, lam_b, g_b, devs_b, gap_b, rel_gap,
                                   res_b, total_iters, primal_b, dual_b, "augmented-lagrangian", log),
            iters=total_iters,
            residual=rel_gap,
        )

    gap = max(0.0, primal - dual_val)
    return _package_solution(
        scenario, lam, g_f, devs, gap, rel_gap, residual_f,
        total_iters, primal, dual_val, "augmented-lagrangian", log,
    )


# ----------------------------------------------------------------- dual ascent

def find_equilibrium_price(
    scenario: Scenario,
    tol: float = 1e-6,
    max_iter: int = 50_000,
    max_ascent: int = 400,
    init: str = "planner",
) -> EquilibriumSolution:
    """Discover the equilibrium price by ascent on the decomposed dual.

    Spectral (Barzilai-Borwein) subgradient ascent over the multiplier
    trajectory, each step re-solving the decomposed agent subproblems with
    warm starts. With ``init="planner"`` the ascent starts from the
    planner's multiplier (the direct primal solve doubles as the internal
    cross-check); ``init="marginal-cost"`` starts from the supplier's
    marginal cost at the net baseline load and climbs from scratch.

    Because the nearly flat QoS cost interiors leave each agent indifferent
    across a face of optimal responses, the price alone does not select the
    market-clearing allocation. The returned deviations and generation are
    the planner's (welfare-optimal) selection from those faces, and the
    weak-duality gap at the returned price bounds every single agent's loss
    versus its own best response, which is the certificate that the
    allocation solves each agent's problem at this price.
    """
    if scenario.exogenous_price is not None:
        raise ValidationError("equilibrium discovery expects no exogenous price")
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    if init not in ("planner", "marginal-cost"):
        raise ValidationError(f"unknown init {init!r}")
    check_feasibility(scenario)

    grid = scenario.grid
    dt = grid.dt_hours
    load = scenario.net_baseline_load()
    sup = scenario.supplier
    peak = max(1e-9, float(np.max(np.abs(load))))
    tol_bal = tol * peak
    sub_tol = max(1e-9, 0.1 * tol)

    plan = None
    if init == "planner":
        try:
            plan = solve_spp(scenario, tol=tol, max_iter=max_iter)
        except SolverError as err:
            plan = err.best  # uncertified allocation; the ascent may rescue it
        lam = plan.price.values.copy()
    else:
        lam = _marginal_cost_price(scenario)

    warm: dict = {}
    log: list[tuple[int, float, float]] = []

    best_primal = plan.primal_value if plan is not None else float("inf")
    best_alloc = (plan.gen.values, [plan.devs[c.name].values for c in scenario.classes]) if plan is not None else None
    best = None  # (rel_gap, lam, dual_val, gap, bal)

    lam_prev = None
    res_prev = None
    step = dt / max(2.0 * sup.gen_cost_coeffs[2], 1e-3)  # inverse dual curvature scale
    evals = 0
    for k in range(max_ascent):
        dual_val, residual, g_star, dev_map = _dual_eval(scenario, lam, sub_tol, max_iter, warm)
        evals += 1

        # feasible recovery from the dual responses; may improve the primal bound
        devs = [dev_map[c.name] for c in scenario.classes]
        d_sigma = np.sum(devs, axis=0) if devs else np.zeros(grid.n_steps)
        g_f = np.clip(load + d_sigma, sup.g_min, sup.g_max)
        rec_primal = _recovered_primal_cost(scenario, g_f, devs)
        if rec_primal < best_primal:
            best_primal = rec_primal
            best_alloc = (g_f, devs)

        gap = best_primal - dual_val
        rel_gap = gap / max(1.0, abs(best_primal))
        log.append((k, rel_gap, float(np.max(np.abs(residual)))))
        if best is None or rel_gap < best[0]:
            best = (rel_gap, lam.copy(), dual_val, gap)
        if rel_gap <= tol:
            break

        # spectral step on the concave dual: lam <- lam + step * subgradient
        if lam_prev is not None:
            s = lam - lam_prev
            y = residual - res_prev
            sy = -float(s @ y)  # residual decreases along ascent: flip sign
            if sy > 1e-30:
                step = float(s @ s) / sy
        lam_prev = lam.copy()
        res_prev = residual.copy()
        lam = lam + np.clip(step, 1e-6, 1e4) * residual
    else:
        rel_gap, lam_b, dual_b, gap_b = best
        g_b, devs_b = best_alloc if best_alloc is not None else (np.clip(load, sup.g_min, sup.g_max), [])
        raise SolverError(
            f"dual ascent did not certify gap <= {tol:.1e} (best relative gap {rel_gap:.3e})",
            best=_package_solution(scenario, lam_b, g_b, devs_b, max(0.0, gap_b), rel_gap,
                                   _balance_residual(load, g_b, devs_b), evals,
                                   best_primal, dual_b, "dual-ascent", log),
            iters=evals,
            residual=rel_gap,
        )

    g_out, devs_out = best_alloc
    bal = _balance_residual(load, g_out, devs_out)
    sol = _package_solution(
        scenario, lam, g_out, devs_out, max(0.0, gap), rel_gap, bal,
        evals, best_primal, dual_val, "dual-ascent", log,
    )
    if bal > tol_bal:
        raise SolverError(
            f"equilibrium allocation violates balance by {bal:.3e} GW",
            best=sol, iters=evals, residual=bal,
        )
    _certify_agent_optimality(sol, scenario, dev_map, g_star, tol)
    return sol


def _recovered_primal_cost(scenario, g, devs):
    sup = scenario.supplier
    dt = scenario.grid.dt_hours
    gdot = np.diff(g, prepend=sup.g0) / dt
    cost = float(np.sum(sup.gen_cost(g))) + float(np.sum(sup.ramp_cost(gdot)))
    for cls, d in zip(scenario.classes, devs):
        x = soc_path(cls.decay_factor(dt), cls.input_gain(dt), cls.x0, d)
        cost += float(np.sum(qos_cost(cls, x)))
    return cost * dt


def _balance_residual(load, g, devs):
    d_sigma = np.sum(devs, axis=0) if len(devs) else np.zeros_like(load)
    return float(np.max(np.abs(load + d_sigma - g)))


def _certify_agent_optimality(sol, scenario, dual_devs, dual_gen, tol):
    """Assert the returned allocation is optimal for every agent at the price.

    The dual subproblem minima are each agent's best achievable value at
    ``sol.price``; the allocation may lose at most the certified gap to
    them (and in aggregate exactly the gap, by the decomposition).
    """
    lam = sol.price.values
    dt = scenario.grid.dt_hours
    slack = max(tol * max(1.0, abs(sol.primal_value)), 10.0 * sol.duality_gap)

    sup_obj = SupplierObjective(scenario.supplier, lam, dt)
    alloc = -sup_obj.value_and_grad(sol.gen.values)[0]
    ideal = -sup_obj.value_and_grad(dual_gen)[0]
    if alloc < ideal - slack:
        raise SolverError(
            f"supplier allocation loses {ideal - alloc:.3e} k$ to its best response"
        )
    for cls in scenario.classes:
        agg = AggregatorObjective(cls, lam)
        alloc = -agg.value_and_grad(sol.devs[cls.name].values)[0]
        ideal = -agg.value_and_grad(dual_devs[cls.name])[0]
        if alloc < ideal - slack:
            raise SolverError(
                f"class {cls.name} allocation loses {ideal - alloc:.3e} k$ to its best response"
            )


def verify_equilibrium(sol: EquilibriumSolution, scenario: Scenario, tol: float = 1e-6) -> float:
    """Max loss of any agent in ``sol`` versus a fresh best response at its price.

    Re-solves every agent's problem at ``sol.price`` and compares achieved
    objectives; raises :class:`SolverError` if any agent could improve by
    more than the tolerance-scaled slack. Returns the worst loss found (k$).
    """
    lam = sol.price
    dt = scenario.grid.dt_hours
    slack = max(tol * max(1.0, abs(sol.primal_value)), 10.0 * sol.duality_gap)
    worst = 0.0

    sup_obj = SupplierObjective(scenario.supplier, lam.values, dt)
    alloc = -sup_obj.value_and_grad(sol.gen.values)[0]
    fresh = supplier_best_response(scenario.supplier, lam, tol=max(1e-9, 0.1 * tol))
    worst = max(worst, fresh.objective - alloc)
    for cls in scenario.classes:
        agg = AggregatorObjective(cls, lam.values)
        alloc = -agg.value_and_grad(sol.devs[cls.name].values)[0]
        fresh = aggregator_best_response(cls, lam, tol=max(1e-9, 0.1 * tol))
        worst = max(worst, fresh.objective - alloc)
    if worst > slack:
        raise SolverError(f"an agent can improve by {worst:.3e} k$ at the returned price")
    return worst


# ------------------------------------------------------ marginal-value check

def check_marginal_value(
    sol: EquilibriumSolution,
    classes,
    interior_margin: float = 1e-6,
) -> list[MarginalValueReport]:
    """Residuals of the equilibrium identity linking QoS marginal cost and price.

    At every interior optimum the marginal QoS cost satisfies
    -c'(x[k]) = alpha * price[k] - (price[k+1] - price[k]) / dt up to
    discretization error of order dt. First/last steps and steps where the
    deviation rides a bound (at k-1 or k) are excluded; residuals are
    normalized by each class's marginal cost at capacity.
    """
    lam = sol.price.values
    dt = sol.price.grid.dt_hours
    n = lam.shape[0]
    reports = []
    for cls in classes:
        dev = sol.devs[cls.name].values
        x = sol.socs[cls.name].values
        lo = cls.dev_min.values
        hi = cls.dev_max.values
        margin = interior_margin * np.maximum(hi - lo, 1.0)
        interior = (dev > lo + margin) & (dev < hi - margin)

        resid = np.full(n, np.nan)
        k = np.arange(1, n - 1)
        lam_dot = (lam[k + 1] - lam[k]) / dt
        raw = -qos_cost_prime(cls, x[k]) - (cls.alpha * lam[k] - lam_dot)
        mask = interior[k] & interior[k - 1]
        resid[k[mask]] = raw[mask]

        norm = cls.cost_scale * cls.cost_degree / cls.capacity
        vals = resid[np.isfinite(resid)] / norm
        reports.append(
            MarginalValueReport(
                name=cls.name,
                residuals=resid / norm,
                max_norm=float(np.max(np.abs(vals))) if vals.size else float("nan"),
                rms_norm=float(np.sqrt(np.mean(vals**2))) if vals.size else float("nan"),
                n_interior=int(vals.size),
            )
        )
    return reports

"""Grid flexibility as virtual energy storage: dynamic competitive
equilibrium solver and load-ensemble simulator.

Subpackages:

* :mod:`gridflex.model` - domain types, load-class dynamics, cost functionals
* :mod:`gridflex.agents` - price-taking best responses and the peak-price experiment
* :mod:`gridflex.equilibrium` - social planner's problem and dual price discovery
* :mod:`gridflex.ensemble` - micro-level thermostat population simulator
* :mod:`gridflex.scenarios` - configuration, default populations, time-series I/O
* :mod:`gridflex.cli` - batch command-line front end
"""

from .model import (
    LoadClass,
    Scenario,
    SupplierModel,
    TimeGrid,
    Trajectory,
    Unit,
    eval_demand_utility,
    eval_supplier_utility,
    integrate_soc,
    qos_cost,
)

__version__ = "0.1.0"

__all__ = [
    "LoadClass",
    "Scenario",
    "SupplierModel",
    "TimeGrid",
    "Trajectory",
    "Unit",
    "eval_demand_utility",
    "eval_supplier_utility",
    "integrate_soc",
    "qos_cost",
    "__version__",
]

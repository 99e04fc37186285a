"""Scenario construction: config files, default populations, time-series I/O.

Configs are YAML documents with sections ``grid``, ``supplier``,
``classes``, ``event``, optional ``inflexible``, ``ensemble`` and ``io``.
Baseline and net-load profiles are either named diurnal shapes evaluated
analytically on the grid (so refinement studies stay consistent) or CSV
time series resampled to the grid.
"""

from __future__ import annotations

import csv
import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .agents import CppEvent
from .errors import ConfigError, ValidationError
from .model import LoadClass, Scenario, SupplierModel, TimeGrid, Trajectory, Unit

__all__ = [
    "ScenarioConfig",
    "load_scenario",
    "load_config",
    "save_config",
    "bundled_config_path",
    "build_cpp_price",
    "build_scarcity_netload",
    "diurnal_shape",
    "resample",
    "read_series_csv",
    "write_series_csv",
]

BUNDLED = ("cpp_default", "scarcity_default", "ensemble_default", "kkt_2step")


# ------------------------------------------------------------ named shapes

def diurnal_shape(name: str, t_hours: np.ndarray) -> np.ndarray:
    """Normalized (peak 1) diurnal profile evaluated at hours-of-day."""
    t = np.asarray(t_hours, dtype=float) % 24.0

    def bell(center, width):
        return np.exp(-0.5 * ((t - center) / width) ** 2)

    if name == "flat":
        out = np.ones_like(t)
    elif name == "afternoon_peak":  # air conditioning
        out = 0.25 + 0.75 * bell(16.5, 4.0)
    elif name == "daytime":  # pool pumps, irrigation
        out = 0.25 + 0.75 * bell(12.5, 3.5)
    elif name == "morning_evening":  # residential water heating
        out = 0.3 + 0.6 * bell(7.0, 1.5) + 0.7 * bell(20.0, 2.5)
    elif name == "business_hours":  # commercial water heating
        out = 0.35 + 0.65 * bell(12.0, 3.0)
    elif name == "duck_curve":  # net inflexible load: midday dip, evening peak
        out = 0.5 + 0.12 * bell(7.5, 2.0) - 0.22 * bell(13.0, 2.5) + 0.5 * bell(19.0, 2.2)
    else:
        raise ConfigError(f"unknown profile shape {name!r}")
    return out / np.max(out)


# -------------------------------------------------------------- resampling

def resample(traj: Trajectory, grid: TimeGrid) -> Trajectory:
    """Re-grid a piecewise-constant series, preserving time averages.

    Refining repeats samples (zero-order hold); coarsening averages whole
    blocks. Step sizes must divide one another.
    """
    if traj.grid == grid:
        return Trajectory(grid, traj.values, traj.unit)
    if abs(traj.grid.horizon_hours - grid.horizon_hours) > 1e-9:
        raise ValidationError("resampling cannot change the horizon")
    src, dst = traj.grid.step_minutes, grid.step_minutes
    ratio = src / dst
    if abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1:
        return Trajectory(grid, np.repeat(traj.values, round(ratio)), traj.unit)
    ratio = dst / src
    if abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1:
        k = round(ratio)
        vals = traj.values.reshape(-1, k).mean(axis=1)
        return Trajectory(grid, vals, traj.unit)
    raise ValidationError(f"incompatible steps {src} and {dst} minutes")


# ----------------------------------------------------------------- CSV I/O

def read_series_csv(path, column: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read (time_hours, values) from a CSV with a header row.

    The time column is either ``step`` (index) or ``time_hours``; any other
    single column (or the named one) is the value series.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    if len(rows) < 2:
        raise ConfigError(f"{path}: need a header and at least one row")
    header = [h.strip() for h in rows[0]]
    time_col = None
    for cand in ("time_hours", "step"):
        if cand in header:
            time_col = header.index(cand)
            break
    if time_col is None:
        raise ConfigError(f"{path}: no 'time_hours' or 'step' column")
    if column is None:
        value_cols = [i for i in range(len(header)) if i != time_col]
        if len(value_cols) != 1:
            raise ConfigError(f"{path}: specify a value column, found {len(value_cols)}")
        val_col = value_cols[0]
    else:
        if column not in header:
            raise ConfigError(f"{path}: no column {column!r}")
        val_col = header.index(column)
    try:
        data = np.array([[float(r[time_col]), float(r[val_col])] for r in rows[1:]])
    except (ValueError, IndexError) as err:
        raise ConfigError(f"{path}: {err}") from None
    return data[:, 0], data[:, 1]


def write_series_csv(path, columns: dict, time_hours: np.ndarray):
    """Write aligned series as CSV with a time_hours column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_hours"] + names)
        for i, t in enumerate(time_hours):
            w.writerow([f"{t:.10g}"] + [f"{columns[n][i]:.10g}" for n in names])


# ------------------------------------------------------------ price/netload

def build_cpp_price(grid: TimeGrid, event: CppEvent) -> Trajectory:
    """Two-level tariff: base price off-event, uplifted price in-event."""
    window = event.window(grid)
    values = np.where(window, event.base_price * (1.0 + event.uplift_fraction), event.base_price)
    return Trajectory(grid, values, Unit.PRICE)


def build_scarcity_netload(
    grid: TimeGrid,
    nominal: Trajectory,
    bump_gw: float,
    start_hours: float,
    duration_hours: float,
) -> Trajectory:
    """Nominal net load plus a rectangular scarcity bump."""
    if nominal.grid != grid:
        raise ValidationError("nominal net load is on a different grid")
    if start_hours < 0 or start_hours + duration_hours > grid.horizon_hours + 1e-9:
        raise ValidationError("scarcity window outside the horizon")
    t = grid.times()
    window = (t >= start_hours - 1e-9) & (t < start_hours + duration_hours - 1e-9)
    return Trajectory(grid, nominal.values + np.where(window, bump_gw, 0.0), nominal.unit)


# ----------------------------------------------------------- configuration

@dataclass
class EventSpec:
    """Parsed event section: either a CPP tariff or a scarcity bump."""

    kind: str  # "cpp" | "scarcity"
    start_hours: float
    duration_hours: float
    uplift_fraction: float = 0.10
    base_price: float = 40.0
    bump_gw: float = 40.0

    def cpp_event(self) -> CppEvent:
        return CppEvent(
            start_hours=self.start_hours,
            duration_hours=self.duration_hours,
            uplift_fraction=self.uplift_fraction,
            base_price=self.base_price,
        )


@dataclass
class EnsembleSpec:
    """Parsed ensemble section for the micro-simulation commands."""

    n_loads: int = 100_000
    step_seconds: float = 10.0
    seed: int = 7
    setpoint_c: float = 55.0
    deadband_c: float = 2.0
    rated_kw: float = 4.5
    thermal_time_constant_hours: float = 90.0
    heat_rate_c_per_hour: float = 20.0
    ambient_c: float = 20.0
    draw_rate_per_hour: float = 0.45
    draw_mean_c: float = 0.35
    heterogeneity: float = 0.2
    reference_csv: str | None = None
    reference_fraction: float = 0.3


@dataclass
class ScenarioConfig:
    """Validated configuration: scenario plus experiment settings."""

    name: str
    scenario: Scenario
    event: EventSpec | None = None
    ensemble: EnsembleSpec | None = None
    out_dir: str | None = None
    raw: dict = field(default_factory=dict)


def bundled_config_path(name: str) -> Path:
    """Path of a configuration shipped with the package."""
    if name not in BUNDLED:
        raise ConfigError(f"no bundled config {name!r}; available: {', '.join(BUNDLED)}")
    return Path(importlib.resources.files("gridflex") / "configs" / f"{name}.yaml")


def _need(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing key {key!r}", location=where)
    return section[key]


def _profile(spec, grid: TimeGrid, base_dir: Path, where: str) -> np.ndarray:
    """Profile values on the grid from a shape/csv/constant/list spec."""
    t = grid.times()
    if isinstance(spec, (int, float)):
        return np.full(grid.n_steps, float(spec))
    if isinstance(spec, list):
        if len(spec) != grid.n_steps:
            raise ConfigError(
                f"inline profile has {len(spec)} samples, grid needs {grid.n_steps}", location=where
            )
        return np.asarray(spec, dtype=float)
    if not isinstance(spec, dict):
        raise ConfigError(f"cannot interpret profile {spec!r}", location=where)
    if "shape" in spec:
        shape = diurnal_shape(spec["shape"], t)
        scale = float(spec.get("scale_gw", 1.0))
        floor = float(spec.get("floor_gw", 0.0))
        return floor + scale * shape
    if "csv" in spec:
        t_src, vals = read_series_csv(base_dir / spec["csv"], spec.get("column"))
        if len(vals) == grid.n_steps:
            return vals
        # zero-order hold from the source sampling onto the grid
        src_grid = TimeGrid(grid.horizon_hours, grid.horizon_hours * 60.0 / len(vals))
        return resample(Trajectory(src_grid, vals, Unit.GW), grid).values
    raise ConfigError("profile needs 'shape', 'csv', a constant, or a sample list", location=where)


def _parse_class(entry: dict, grid: TimeGrid, base_dir: Path, idx: int) -> LoadClass:
    where = f"classes[{idx}]"
    name = _need(entry, "name", where)
    where = f"classes[{name}]"
    baseline = _profile(_need(entry, "baseline", where), grid, base_dir, f"{where}.baseline")
    if np.any(baseline < 0):
        raise ConfigError("baseline must be non-negative", location=where)

    if "max_charge_gw" in entry:
        dev_max = np.full(grid.n_steps, float(entry["max_charge_gw"]))
    elif "rated_gw" in entry:
        dev_max = float(entry["rated_gw"]) - baseline
        if np.any(dev_max < 0):
            raise ConfigError("rated_gw below the baseline peak", location=where)
    else:
        raise ConfigError("need 'rated_gw' or 'max_charge_gw'", location=where)

    shed = entry.get("max_shed_fraction", 1.0)
    if not 0.0 <= shed <= 1.0:
        raise ConfigError("max_shed_fraction must be within [0, 1]", location=where)
    dev_min = -shed * baseline

    try:
        return LoadClass(
            name=name,
            alpha=float(_need(entry, "alpha", where)),
            capacity=float(_need(entry, "capacity", where)),
            cost_scale=float(_need(entry, "cost_scale", where)),
            cost_degree=int(entry.get("cost_degree", 8)),
            baseline=Trajectory(grid, baseline, Unit.GW),
            dev_min=Trajectory(grid, dev_min, Unit.GW),
            dev_max=Trajectory(grid, dev_max, Unit.GW),
            x0=float(entry.get("x0", 0.0)),
        )
    except ValidationError as err:
        raise ConfigError(str(err), location=where) from None


def load_config(path, overrides: dict | None = None) -> ScenarioConfig:
    """Parse and validate a scenario configuration file.

    ``overrides`` replaces top-level keys (dotted paths) before validation,
    which is how CLI flags take precedence over the file.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        loc = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"YAML parse error: {err}", location=loc) from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping", location=str(path))

    for key, value in (overrides or {}).items():
        parts = key.split(".")
        target = doc
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = value

    return parse_config(doc, base_dir=path.parent, name=path.stem)


def parse_config(doc: dict, base_dir: Path = Path("."), name: str = "scenario") -> ScenarioConfig:
    grid_sec = _need(doc, "grid", "grid")
    try:
        grid = TimeGrid(
            horizon_hours=float(_need(grid_sec, "horizon_hours", "grid")),
            step_minutes=float(_need(grid_sec, "step_minutes", "grid")),
        )
    except ValidationError as err:
        raise ConfigError(str(err), location="grid") from None

    sup_sec = doc.get("supplier")
    if sup_sec is None:
        # placeholder supplier for ensemble-only configs
        supplier = SupplierModel(
            gen_cost_coeffs=(0.0, 20.0, 0.4), ramp_cost_coeff=0.1,
            g_min=0.0, g_max=1000.0, g0=50.0,
        )
    else:
        try:
            supplier = SupplierModel(
                gen_cost_coeffs=tuple(_need(sup_sec, "gen_cost", "supplier")),
                ramp_cost_coeff=float(sup_sec.get("ramp_cost", 0.0)),
                g_min=float(sup_sec.get("g_min", 0.0)),
                g_max=float(_need(sup_sec, "g_max", "supplier")),
                g0=float(_need(sup_sec, "g0", "supplier")),
            )
        except (ValidationError, TypeError) as err:
            raise ConfigError(str(err), location="supplier") from None

    classes = tuple(
        _parse_class(entry, grid, base_dir, i)
        for i, entry in enumerate(doc.get("classes") or [])
    )

    event = None
    if "event" in doc and doc["event"]:
        ev = doc["event"]
        kind = _need(ev, "type", "event")
        if kind not in ("cpp", "scarcity"):
            raise ConfigError(f"event type must be 'cpp' or 'scarcity', got {kind!r}", location="event")
        event = EventSpec(
            kind=kind,
            start_hours=float(_need(ev, "start_hours", "event")),
            duration_hours=float(ev.get("duration_minutes", 90.0)) / 60.0,
            uplift_fraction=float(ev.get("uplift_fraction", 0.10)),
            base_price=float(ev.get("base_price", 40.0)),
            bump_gw=float(ev.get("bump_gw", 40.0)),
        )
        if event.start_hours + event.duration_hours > grid.horizon_hours + 1e-9:
            raise ConfigError("event extends past the horizon", location="event")
        if event.kind == "cpp" and not classes:
            raise ConfigError("a peak-price experiment needs at least one load class", location="classes")

    inflex_spec = doc.get("inflexible", {"shape": "duck_curve", "scale_gw": 20.0, "floor_gw": 18.0})
    inflexible = Trajectory(grid, _profile(inflex_spec, grid, base_dir, "inflexible"), Unit.GW)
    if event is not None and event.kind == "scarcity":
        inflexible = build_scarcity_netload(
            grid, inflexible, event.bump_gw, event.start_hours, event.duration_hours
        )

    exogenous = None
    if event is not None and event.kind == "cpp":
        exogenous = build_cpp_price(grid, event.cpp_event())

    scenario = Scenario(
        grid=grid,
        inflexible_load=inflexible,
        classes=classes,
        supplier=supplier,
        exogenous_price=exogenous,
        name=name,
    )

    ensemble = None
    if "ensemble" in doc and doc["ensemble"]:
        es = doc["ensemble"]
        known = {f for f in EnsembleSpec.__dataclass_fields__}
        bad = set(es) - known
        if bad:
            raise ConfigError(f"unknown ensemble keys: {sorted(bad)}", location="ensemble")
        ensemble = EnsembleSpec(**{k: v for k, v in es.items()})
        if ensemble.reference_csv is not None:
            ensemble.reference_csv = str(base_dir / ensemble.reference_csv)

    out_dir = (doc.get("io") or {}).get("out_dir")
    return ScenarioConfig(
        name=doc.get("name", name),
        scenario=scenario,
        event=event,
        ensemble=ensemble,
        out_dir=out_dir,
        raw=doc,
    )


def load_scenario(path) -> Scenario:
    """Load just the scenario from a config file."""
    return load_config(path).scenario


def save_config(cfg: ScenarioConfig, path):
    """Write the raw configuration document back to disk."""
    Path(path).write_text(yaml.safe_dump(cfg.raw, sort_keys=False))

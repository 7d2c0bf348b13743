"""
Per-vehicle measures and the aggregated metrics report of a run.
"""

import math
from abc import ABC, abstractmethod
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .config import Config
from .helper_functions import setup_logging
from .models import VehicleRecord, VehicleState
from .plan_log import PlanRecord

logger = setup_logging(__name__)

STOP_SPEED = 0.1
SPEED_BIN = 50.0


class FuelModel(ABC):
    """Instantaneous consumption rate r(v, a) per second."""

    @abstractmethod
    def rate(self, speed: float, accel: float) -> float:
        pass


class SurrogateFuelModel(FuelModel):
    """β0 + β1·v + β2·max(a, 0)·v."""

    def __init__(self, cfg: Config):
        self.beta0 = cfg.fuel_beta0
        self.beta1 = cfg.fuel_beta1
        self.beta2 = cfg.fuel_beta2

    def rate(self, speed: float, accel: float) -> float:
        return self.beta0 + self.beta1 * speed + self.beta2 * max(accel, 0.0) * speed


def _states(trajectory) -> Sequence[VehicleState]:
    return getattr(trajectory, "states", trajectory)


def fuel_surrogate(trajectory, cfg: Config, model: Optional[FuelModel] = None) -> float:
    """Consumption over every step of a trajectory (or state list)."""
    model = model or SurrogateFuelModel(cfg)
    states = _states(trajectory)
    return sum(model.rate(state.speed, state.accel) * cfg.dt for state in states[:-1])


def distance_travelled(trajectory) -> float:
    states = _states(trajectory)
    if len(states) < 2:
        return 0.0
    return states[-1].pos - states[0].pos


def vehicle_delay(record: VehicleRecord, cfg: Config) -> float:
    """Actual traversal time, counted from the scheduled arrival, minus the free-flow time."""
    if record.exit_time is None:
        raise ValueError(f"Vehicle {record.vehicle.id} has not left the simulation")
    return record.exit_time - record.scheduled_time - record.vehicle.free_flow_time


def count_stops(states: Sequence[VehicleState]) -> int:
    """Times the speed drops below STOP_SPEED after the vehicle was moving."""
    stops = 0
    moving = False
    for state in states:
        if state.speed >= STOP_SPEED:
            moving = True
        elif moving:
            stops += 1
            moving = False
    return stops


def upstream_smooth_cost(states: Sequence[VehicleState], cfg: Config) -> float:
    """Σ δ|a| over the states upstream of the stop bar."""
    return sum(abs(state.accel) for state in states if state.pos <= cfg.stop_bar)


def lane_change_count(states: Sequence[VehicleState]) -> int:
    return sum(1 for prev, cur in zip(states, states[1:]) if cur.lane != prev.lane)


class VehicleMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    vehicle_id: int
    vclass: str
    movement: str
    delay: float
    fuel: float
    fuel_economy: Optional[float]
    lane_changes: int
    stops: int
    smooth_cost: float
    overrides: int = 0


def measure_vehicle(record: VehicleRecord, cfg: Config, model: Optional[FuelModel] = None) -> VehicleMetrics:
    states = record.history
    fuel = fuel_surrogate(states, cfg, model)
    distance = distance_travelled(states) + cfg.exit_len
    fuel += (model or SurrogateFuelModel(cfg)).rate(cfg.speed_limit, 0.0) * cfg.exit_len / cfg.speed_limit
    return VehicleMetrics(
        vehicle_id=record.vehicle.id,
        vclass=record.vehicle.vclass.value,
        movement=record.vehicle.movement.value,
        delay=vehicle_delay(record, cfg),
        fuel=fuel,
        fuel_economy=distance / fuel if fuel > 0 else None,
        lane_changes=lane_change_count(states),
        stops=count_stops(states),
        smooth_cost=upstream_smooth_cost(states, cfg),
        overrides=record.overrides,
    )


class GroupMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    count: int = 0
    mean_delay: Optional[float] = None
    mean_fuel: Optional[float] = None
    mean_fuel_economy: Optional[float] = None
    mean_lane_changes: Optional[float] = None
    mean_stops: Optional[float] = None
    mean_smooth_cost: Optional[float] = None

    @classmethod
    def of(cls, rows: Sequence[VehicleMetrics]) -> "GroupMetrics":
        if not rows:
            return cls()
        economies = [row.fuel_economy for row in rows if row.fuel_economy is not None]
        return cls(
            count=len(rows),
            mean_delay=float(np.mean([row.delay for row in rows])),
            mean_fuel=float(np.mean([row.fuel for row in rows])),
            mean_fuel_economy=float(np.mean(economies)) if economies else None,
            mean_lane_changes=float(np.mean([row.lane_changes for row in rows])),
            mean_stops=float(np.mean([row.stops for row in rows])),
            mean_smooth_cost=float(np.mean([row.smooth_cost for row in rows])),
        )


class PlanAggregate(BaseModel):
    model_config = ConfigDict(frozen=True)

    plans: int = 0
    mean_wall_time: Optional[float] = None
    mean_path_count: Optional[float] = None
    mean_paths_evaluated: Optional[float] = None
    mean_h: Optional[float] = None
    mean_improvement: Optional[float] = None
    fallbacks: int = 0
    kept_previous: int = 0

    @classmethod
    def of(cls, records: Sequence[PlanRecord]) -> "PlanAggregate":
        if not records:
            return cls()
        improvements = [(r.initial_cost - r.best_cost) / r.initial_cost
                        for r in records if r.initial_cost > 0 and math.isfinite(r.initial_cost)]
        return cls(
            plans=len(records),
            mean_wall_time=float(np.mean([r.wall_time for r in records])),
            mean_path_count=float(np.mean([r.path_count for r in records])),
            mean_paths_evaluated=float(np.mean([r.paths_evaluated for r in records])),
            mean_h=float(np.mean([r.h for r in records])),
            mean_improvement=float(np.mean(improvements)) if improvements else None,
            fallbacks=sum(1 for r in records if r.fallback_reason is not None),
            kept_previous=sum(1 for r in records if r.kept_previous),
        )


class MetricsReport(BaseModel):
    """Aggregated outcome of one simulation run."""

    model_config = ConfigDict(frozen=True)

    mode: str
    seed: int
    demand_level: Optional[int] = None
    penetration: float = 0.0
    duration: float
    warmup: float
    scenario_fingerprint: str = ""
    by_class: Dict[str, GroupMetrics] = Field(default_factory=dict)
    by_movement: Dict[str, GroupMetrics] = Field(default_factory=dict)
    throughput: float = 0.0
    admitted: Dict[str, int] = Field(default_factory=dict)
    retired: Dict[str, int] = Field(default_factory=dict)
    active: Dict[str, int] = Field(default_factory=dict)
    admitted_by_movement: Dict[str, int] = Field(default_factory=dict)
    retired_by_movement: Dict[str, int] = Field(default_factory=dict)
    active_by_movement: Dict[str, int] = Field(default_factory=dict)
    queued: int = 0
    speed_profile: Dict[str, List[Optional[float]]] = Field(default_factory=dict)
    plans: PlanAggregate = Field(default_factory=PlanAggregate)
    safety_violations: int = 0
    overrides: int = 0


def speed_profile(records: Iterable[VehicleRecord], cfg: Config, warmup: float) -> Dict[str, List[Optional[float]]]:
    """Space-mean speed per SPEED_BIN-metre bin of the approach, per class and overall."""
    bins = int(math.ceil(cfg.control_len / SPEED_BIN))
    sums = {key: np.zeros(bins) for key in ("ALL", "CAV", "CHV")}
    counts = {key: np.zeros(bins) for key in ("ALL", "CAV", "CHV")}
    for record in records:
        if record.scheduled_time < warmup:
            continue
        key = record.vehicle.vclass.value
        for state in record.history:
            if not 0 <= state.pos < cfg.control_len:
                continue
            index = int(state.pos // SPEED_BIN)
            for group in ("ALL", key):
                sums[group][index] += state.speed * cfg.dt
                counts[group][index] += cfg.dt
    return {key: [float(s / c) if c > 0 else None for s, c in zip(sums[key], counts[key])] for key in sums}


def build_report(*, retired: Sequence[VehicleRecord], active: Sequence[VehicleRecord],
                 admitted: Dict[str, int], queued: int, plan_records: Sequence[PlanRecord], cfg: Config,
                 mode: str, seed: int, duration: float, warmup: float, demand_level: Optional[int] = None,
                 penetration: float = 0.0, scenario_fingerprint: str = "", safety_violations: int = 0,
                 fuel_model: Optional[FuelModel] = None,
                 admitted_by_movement: Optional[Dict[str, int]] = None) -> MetricsReport:
    """
    Aggregate a finished run.

    Vehicles scheduled before the warm-up ends and vehicles still inside at the end are
    left out of the per-vehicle means.
    """
    measured = [measure_vehicle(record, cfg, fuel_model) for record in retired if record.scheduled_time >= warmup]
    by_class = {"ALL": GroupMetrics.of(measured)}
    for vclass in ("CAV", "CHV"):
        by_class[vclass] = GroupMetrics.of([row for row in measured if row.vclass == vclass])
    movements = sorted({row.movement for row in measured})
    by_movement = {}
    for movement in movements:
        rows = [row for row in measured if row.movement == movement]
        by_movement[movement] = GroupMetrics.of(rows)
        for vclass in ("CAV", "CHV"):
            by_movement[f"{movement}/{vclass}"] = GroupMetrics.of([row for row in rows if row.vclass == vclass])

    window = max(duration - warmup, 0.0)
    leaving = [record for record in retired if record.exit_time is not None
               and warmup <= record.exit_time - cfg.exit_len / cfg.speed_limit <= duration]
    throughput = len(leaving) * 3600.0 / window if window > 0 else 0.0

    def by_vclass(records):
        counts = {"CAV": 0, "CHV": 0}
        for record in records:
            counts[record.vehicle.vclass.value] += 1
        return counts

    def by_movement_count(records):
        counts = {movement: 0 for movement in (admitted_by_movement or {})}
        for record in records:
            key = record.vehicle.movement.value
            counts[key] = counts.get(key, 0) + 1
        return counts

    return MetricsReport(
        mode=mode,
        seed=seed,
        demand_level=demand_level,
        penetration=penetration,
        duration=duration,
        warmup=warmup,
        scenario_fingerprint=scenario_fingerprint,
        by_class=by_class,
        by_movement=by_movement,
        throughput=throughput,
        admitted=dict(admitted),
        retired=by_vclass(retired),
        active=by_vclass(active),
        admitted_by_movement=dict(admitted_by_movement or {}),
        retired_by_movement=by_movement_count(retired),
        active_by_movement=by_movement_count(active),
        queued=queued,
        speed_profile=speed_profile(list(retired) + list(active), cfg, warmup),
        plans=PlanAggregate.of(plan_records),
        safety_violations=safety_violations,
        overrides=sum(record.overrides for record in list(retired) + list(active)),
    )


def _weighted(groups: Sequence[GroupMetrics], attr: str) -> Optional[float]:
    pairs = [(getattr(g, attr), g.count) for g in groups if getattr(g, attr) is not None and g.count]
    total = sum(count for _, count in pairs)
    if not total:
        return None
    return sum(value * count for value, count in pairs) / total


def combine_reports(reports: Sequence[MetricsReport]) -> Dict:
    """Seed-aggregated summary: vehicle-weighted group means plus the per-seed breakdown."""
    if not reports:
        return {"seeds": [], "per_seed": {}, "by_class": {}, "by_movement": {}}
    fields = [name for name in GroupMetrics.model_fields if name != "count"]

    def merge(key_name: str) -> Dict:
        keys = sorted({key for report in reports for key in getattr(report, key_name)})
        merged = {}
        for key in keys:
            groups = [getattr(report, key_name)[key] for report in reports if key in getattr(report, key_name)]
            entry = {name: _weighted(groups, name) for name in fields}
            entry["count"] = sum(group.count for group in groups)
            merged[key] = entry
        return merged

    first = reports[0]
    return {
        "mode": first.mode,
        "demand_level": first.demand_level,
        "penetration": first.penetration,
        "scenario_fingerprint": first.scenario_fingerprint,
        "seeds": [report.seed for report in reports],
        "by_class": merge("by_class"),
        "by_movement": merge("by_movement"),
        "throughput": float(np.mean([report.throughput for report in reports])),
        "mean_plan_wall_time": _mean_optional([report.plans.mean_wall_time for report in reports]),
        "mean_plan_path_count": _mean_optional([report.plans.mean_path_count for report in reports]),
        "safety_violations": sum(report.safety_violations for report in reports),
        "per_seed": {str(report.seed): report.model_dump(mode="json") for report in reports},
    }


def _mean_optional(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [value for value in values if value is not None]
    return float(np.mean(present)) if present else None

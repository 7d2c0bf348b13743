"""
Experiment runner: simulation runs over seeds, their artifacts, figure data and the
planner benchmark.
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .behavior import SceneSnapshot
from .demand import DemandSpec, generate_arrivals
from .helper_functions import canonical_json, fingerprint, setup_logging
from .metrics import MetricsReport, build_report, combine_reports
from .models import VehicleClass, VehicleRecord
from .plan_log import InMemoryPlanLog, JsonLinesPlanLog
from .planner import SearchBudget, optimality_indices, plan_trajectory
from .scenario import Scenario, load_scenario
from .world import World

logger = setup_logging(__name__)

PLANNING = "planning"
BENCHMARK = "benchmark"

TRAJECTORY_COLUMNS = [
    "step", "time_s", "vehicle_id", "class", "movement", "lane", "pos_m", "speed_mps",
    "accel_mps2", "lane_change_flag", "passed_flag",
]


@dataclass(frozen=True)
class RunSpec:
    """One simulation run."""
    scenario: Scenario
    demand_level: int
    penetration: float
    seed: int
    mode: str = PLANNING
    duration: float = 1800.0
    warmup: float = 150.0
    demand_scale: float = 1.0
    threads: int = 1
    time_limit: Optional[float] = None
    strict: bool = True
    out_dir: Optional[str] = None

    @property
    def tag(self) -> str:
        return f"{self.mode}_L{self.demand_level}_P{int(round(self.penetration * 100))}_S{self.seed}"

    @property
    def group_tag(self) -> str:
        return f"{self.mode}_L{self.demand_level}_P{int(round(self.penetration * 100))}"


def _as_scenario(scenario: Union[Scenario, str, Path, None]) -> Scenario:
    if scenario is None:
        return Scenario()
    if isinstance(scenario, Scenario):
        return scenario
    return load_scenario(scenario)


def trajectory_frame(records: Iterable[VehicleRecord], dt: float, stop_bar: float) -> pd.DataFrame:
    """Per-vehicle, per-step rows in the fixed export column order."""
    rows = []
    for record in records:
        vehicle = record.vehicle
        previous = None
        for state in record.history:
            rows.append((
                state.step, state.step * dt, vehicle.id, vehicle.vclass.value, vehicle.movement.value,
                state.lane, state.pos, state.speed, state.accel,
                1 if previous is not None and previous.lane != state.lane else 0,
                1 if state.pos > stop_bar else 0,
            ))
            previous = state
    frame = pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)
    return frame.sort_values(["step", "vehicle_id"], kind="mergesort").reset_index(drop=True)


def run_experiment(spec: RunSpec) -> MetricsReport:
    """
    Simulate one seed and write its artifacts when `out_dir` is set.

    Raises:
        ConfigurationError: On an unknown demand level
        SafetyViolationError: When the run is strict and the safety suite fails
    """
    scenario = spec.scenario
    cfg = scenario.config
    demand = DemandSpec.from_level(spec.demand_level, spec.penetration, spec.demand_scale)
    arrivals = generate_arrivals(demand, spec.duration, spec.seed, scenario.geometry.lanes)
    out = Path(spec.out_dir) if spec.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        plan_log = JsonLinesPlanLog(out / f"{spec.tag}_plans.jsonl")
    else:
        plan_log = InMemoryPlanLog()

    world = World(
        cfg, scenario.signal_plan, scenario.geometry, arrivals,
        planning_enabled=spec.mode == PLANNING,
        budget=SearchBudget(wall_time_limit=spec.time_limit, worker_count=spec.threads),
        plan_log=plan_log,
        strict=spec.strict,
    )
    steps = int(math.ceil(spec.duration / cfg.dt - 1e-9))
    logger.info(f"Starting {spec.tag}: {len(arrivals)} arrivals over {spec.duration:g} s")
    try:
        world.run(steps)
    finally:
        plan_log.close()

    report = build_report(
        retired=world.retired,
        active=list(world.records.values()),
        admitted=world.admitted,
        admitted_by_movement=world.admitted_by_movement,
        queued=world.drain_pending(),
        plan_records=plan_log.records(),
        cfg=cfg,
        mode=spec.mode,
        seed=spec.seed,
        duration=spec.duration,
        warmup=spec.warmup,
        demand_level=spec.demand_level,
        penetration=spec.penetration,
        scenario_fingerprint=fingerprint(scenario.to_dict()),
        safety_violations=len(world.violations),
    )
    if out is not None:
        frame = trajectory_frame(list(world.retired) + list(world.records.values()), cfg.dt, cfg.stop_bar)
        frame.to_csv(out / f"{spec.tag}_trajectories.csv", index=False, float_format="%.6f")
        (out / f"{spec.tag}_metrics.json").write_text(canonical_json(report.model_dump(mode="json")),
                                                      encoding="utf-8")
        logger.info(f"Wrote artifacts of {spec.tag} to {out}")
    delay = report.by_class["ALL"].mean_delay
    logger.info(f"Finished {spec.tag}: {sum(report.retired.values())} retired, "
                f"throughput {report.throughput:.0f} veh/h, "
                f"mean delay {'n/a' if delay is None else f'{delay:.2f} s'}")
    return report


def run_seeds(specs: Sequence[RunSpec], jobs: int = 1) -> Dict:
    """
    Run several seeds of the same setting and write the seed-aggregated summary.

    Seeds run in separate processes when `jobs` > 1; results keep the order of `specs`.
    """
    if not specs:
        raise ValueError("No runs requested")
    if jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run_experiment, specs))
    else:
        reports = [run_experiment(spec) for spec in specs]
    summary = combine_reports(reports)
    out_dir = specs[0].out_dir
    if out_dir:
        path = Path(out_dir) / f"summary_{specs[0].group_tag}.json"
        path.write_text(canonical_json(summary), encoding="utf-8")
        logger.info(f"Wrote summary {path}")
    return summary


# ---------------------------------------------------------------------------
# Figure data
# ---------------------------------------------------------------------------

_CLASS_MEASURES = {
    "delay": "mean_delay",
    "fuel": "mean_fuel",
    "fuel_economy": "mean_fuel_economy",
    "lane_changes": "mean_lane_changes",
    "stops": "mean_stops",
    "smooth_cost": "mean_smooth_cost",
}


def plot_data(in_dir: Union[str, Path], out_dir: Union[str, Path]) -> List[Path]:
    """
    Reshape summaries and planner benchmarks of a directory into one CSV per measure.

    Returns the files written.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = [json.loads(path.read_text(encoding="utf-8")) for path in sorted(in_dir.glob("summary_*.json"))]
    written: List[Path] = []

    def save(frame: pd.DataFrame, name: str):
        path = out_dir / name
        frame.to_csv(path, index=False, float_format="%.6f")
        written.append(path)

    if summaries:
        rows = []
        for summary in summaries:
            for group, values in summary["by_class"].items():
                rows.append({"mode": summary["mode"], "level": summary["demand_level"],
                             "penetration": summary["penetration"], "class": group,
                             "count": values.get("count"),
                             **{name: values.get(field) for name, field in _CLASS_MEASURES.items()}})
        frame = pd.DataFrame(rows).sort_values(["mode", "level", "penetration", "class"], kind="mergesort")
        for name in _CLASS_MEASURES:
            save(frame[["mode", "level", "penetration", "class", "count", name]], f"{name}.csv")

        save(pd.DataFrame([{"mode": s["mode"], "level": s["demand_level"], "penetration": s["penetration"],
                            "throughput": s["throughput"]} for s in summaries])
             .sort_values(["mode", "level", "penetration"], kind="mergesort"), "throughput.csv")

        profile_rows = []
        for summary in summaries:
            per_seed = list(summary["per_seed"].values())
            for group in ("ALL", "CAV", "CHV"):
                series = [seed["speed_profile"].get(group, []) for seed in per_seed]
                for index in range(max((len(s) for s in series), default=0)):
                    values = [s[index] for s in series if index < len(s) and s[index] is not None]
                    profile_rows.append({"mode": summary["mode"], "level": summary["demand_level"],
                                         "penetration": summary["penetration"], "class": group,
                                         "bin_start_m": index * 50.0,
                                         "speed_mps": float(np.mean(values)) if values else None})
        save(pd.DataFrame(profile_rows), "speed_profile.csv")

    bench_rows = []
    for path in sorted(in_dir.glob("bench_*.json")):
        bench_rows.extend(json.loads(path.read_text(encoding="utf-8"))["rows"])
    if bench_rows:
        bench = pd.DataFrame(bench_rows)
        timing = (bench.groupby(["level", "workers", "time_limit"], dropna=False)
                  .agg(mean_wall_time=("wall_time", "mean"), mean_path_count=("path_count", "mean"),
                       problems=("wall_time", "size"))
                  .reset_index())
        save(timing, "planning_time.csv")
        optimality = (bench.groupby(["level", "workers", "time_limit"], dropna=False)
                      .agg(mean_gap_closed=("gap_closed", "mean"), mean_verbatim=("verbatim", "mean"))
                      .reset_index())
        save(optimality, "optimality.csv")
    logger.info(f"Wrote {len(written)} figure tables to {out_dir}")
    return written


# ---------------------------------------------------------------------------
# Planner benchmark
# ---------------------------------------------------------------------------

def collect_planning_problems(scenario: Scenario, demand_level: int, penetration: float, seed: int,
                              count: int, warmup: float = 150.0, stride: int = 5,
                              max_duration: float = 1800.0) -> List[Tuple[SceneSnapshot, int]]:
    """
    Record (snapshot, subject) pairs from a planning run.

    Planning itself uses a zero time budget so the run advances quickly; every `stride`-th
    planning call after the warm-up is kept until `count` problems are collected.
    """
    cfg = scenario.config
    demand = DemandSpec.from_level(demand_level, penetration)
    arrivals = generate_arrivals(demand, max_duration, seed, scenario.geometry.lanes)
    world = World(cfg, scenario.signal_plan, scenario.geometry, arrivals,
                  budget=SearchBudget(wall_time_limit=0.0), strict=False)
    problems: List[Tuple[SceneSnapshot, int]] = []
    seen = 0
    steps = int(math.ceil(max_duration / cfg.dt))
    while world.clock < steps and len(problems) < count:
        if world.clock * cfg.dt >= warmup:
            snapshot = world.snapshot()
            for vid in snapshot.ordered_ids:
                if snapshot.vehicles[vid].vclass is not VehicleClass.CAV:
                    continue
                state = snapshot.states[vid]
                if state.pos < 0 or state.pos > cfg.stop_bar:
                    continue
                if seen % stride == 0 and len(problems) < count:
                    problems.append((replace(snapshot, registry=dict(world.registry), committed={}), vid))
                seen += 1
        world.step()
    logger.info(f"Collected {len(problems)} planning problems at level {demand_level}")
    return problems


def benchmark_planner(problems: Sequence[Tuple[SceneSnapshot, int]], scenario: Scenario,
                      worker_counts: Sequence[int] = (1, 2, 4, 8),
                      time_limits: Sequence[Optional[float]] = (None,),
                      level: Optional[int] = None) -> List[Dict]:
    """
    Plan every problem under each (workers, time limit) budget.

    The unlimited single-worker result serves as the reference optimum for the
    optimality indices.
    """
    cfg, plan, geometry = scenario.config, scenario.signal_plan, scenario.geometry
    rows = []
    for index, (snapshot, subject) in enumerate(problems):
        reference_log = InMemoryPlanLog()
        plan_trajectory(snapshot, subject, plan, SearchBudget(), cfg, geometry=geometry,
                        plan_log=reference_log, registry=dict(snapshot.registry))
        reference = reference_log.records()[-1]
        for workers in worker_counts:
            for limit in time_limits:
                log = InMemoryPlanLog()
                plan_trajectory(snapshot, subject, plan, SearchBudget(wall_time_limit=limit, worker_count=workers),
                                cfg, geometry=geometry, plan_log=log, registry=dict(snapshot.registry))
                record = log.records()[-1]
                verbatim, gap_closed = optimality_indices(record.initial_cost, record.best_cost,
                                                          reference.best_cost)
                rows.append({
                    "problem": index, "level": level, "subject": subject, "step": snapshot.step,
                    "workers": workers, "time_limit": limit, "wall_time": record.wall_time,
                    "path_count": record.path_count, "paths_evaluated": record.paths_evaluated,
                    "h": record.h, "initial_cost": record.initial_cost, "best_cost": record.best_cost,
                    "reference_cost": reference.best_cost, "verbatim": verbatim, "gap_closed": gap_closed,
                })
        logger.debug(f"Benchmarked problem {index} (vehicle {subject}, step {snapshot.step})")
    return rows

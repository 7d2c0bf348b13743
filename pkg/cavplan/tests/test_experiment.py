"""
Tests for simulation runs, their artifacts and the figure tables.
"""

import json
import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from cavplan.experiment import (
    BENCHMARK,
    PLANNING,
    TRAJECTORY_COLUMNS,
    RunSpec,
    benchmark_planner,
    collect_planning_problems,
    plot_data,
    run_experiment,
    run_seeds,
    trajectory_frame,
)
from cavplan.helper_functions import canonical_json
from cavplan.models import Movement, Vehicle, VehicleClass, VehicleRecord, VehicleState
from cavplan.plan_log import InMemoryPlanLog
from cavplan.planner import SearchBudget, plan_trajectory, solver_pool
from cavplan.scenario import Scenario


@pytest.fixture
def scenario():
    return Scenario()


def benchmark_spec(scenario, tmp_path=None, seed=1, **overrides):
    values = dict(scenario=scenario, demand_level=1, penetration=0.5, seed=seed, mode=BENCHMARK,
                  duration=120.0, warmup=10.0, strict=False, out_dir=str(tmp_path) if tmp_path else None)
    values.update(overrides)
    return RunSpec(**values)


def test_run_tags(scenario):
    spec = RunSpec(scenario=scenario, demand_level=3, penetration=0.6, seed=4)
    assert spec.tag == "planning_L3_P60_S4"
    assert spec.group_tag == "planning_L3_P60"


def test_trajectory_frame():
    vehicle = Vehicle(id=5, vclass=VehicleClass.CAV, movement=Movement.LEFT, length=4.0)
    history = [VehicleState(step=3, lane=1, pos=480.0, speed=10.0, accel=1.0),
               VehicleState(step=4, lane=0, pos=490.5, speed=11.0),
               VehicleState(step=5, lane=0, pos=501.0, speed=10.0)]
    other = Vehicle(id=2, vclass=VehicleClass.CHV, movement=Movement.THROUGH, length=4.0)
    frame = trajectory_frame([VehicleRecord(vehicle=vehicle, scheduled_time=0.0, history=history),
                              VehicleRecord(vehicle=other, scheduled_time=0.0,
                                            history=[VehicleState(step=4, lane=1, pos=0.0, speed=16.6)])],
                             dt=1.0, stop_bar=500.1)
    assert list(frame.columns) == TRAJECTORY_COLUMNS
    assert list(frame["vehicle_id"]) == [5, 2, 5, 5]
    rows = frame[frame["vehicle_id"] == 5]
    assert list(rows["lane_change_flag"]) == [0, 1, 0]
    assert list(rows["passed_flag"]) == [0, 0, 1]
    assert rows.iloc[0]["class"] == "CAV"
    assert rows.iloc[0]["movement"] == "LEFT"


def test_benchmark_run_writes_artifacts(scenario, tmp_path):
    spec = benchmark_spec(scenario, tmp_path)
    report = run_experiment(spec)
    assert report.mode == BENCHMARK
    assert report.plans.plans == 0
    assert report.safety_violations == 0
    assert sum(report.admitted.values()) > 0
    for movement, admitted in report.admitted_by_movement.items():
        assert admitted == report.retired_by_movement.get(movement, 0) + report.active_by_movement.get(movement, 0)
    for vclass, admitted in report.admitted.items():
        assert admitted == report.retired[vclass] + report.active[vclass]

    frame = pd.read_csv(tmp_path / f"{spec.tag}_trajectories.csv")
    assert list(frame.columns) == TRAJECTORY_COLUMNS
    assert frame["speed_mps"].max() <= scenario.config.speed_limit + 1e-6
    metrics = json.loads((tmp_path / f"{spec.tag}_metrics.json").read_text(encoding="utf-8"))
    assert metrics["seed"] == 1
    assert metrics["scenario_fingerprint"] == report.scenario_fingerprint
    assert (tmp_path / f"{spec.tag}_plans.jsonl").read_text(encoding="utf-8") == ""


def test_runs_are_reproducible(scenario, tmp_path):
    """Two runs of one seed write byte-identical trajectories and metrics."""
    first = run_experiment(benchmark_spec(scenario, tmp_path / "first"))
    second = run_experiment(benchmark_spec(scenario, tmp_path / "second"))
    assert first == second
    tag = benchmark_spec(scenario).tag
    for suffix in ("_trajectories.csv", "_metrics.json"):
        assert (tmp_path / "first" / f"{tag}{suffix}").read_bytes() == \
            (tmp_path / "second" / f"{tag}{suffix}").read_bytes()


def test_without_cavs_planning_matches_benchmark(scenario):
    planning = run_experiment(benchmark_spec(scenario, penetration=0.0, mode=PLANNING))
    benchmark = run_experiment(benchmark_spec(scenario, penetration=0.0))
    assert planning.plans.plans == 0
    assert planning.by_class == benchmark.by_class
    assert planning.model_copy(update={"mode": BENCHMARK}) == benchmark


def test_run_seeds_writes_summary(scenario, tmp_path):
    specs = [benchmark_spec(scenario, tmp_path, seed=seed, duration=60.0) for seed in (1, 2)]
    summary = run_seeds(specs)
    assert summary["seeds"] == [1, 2]
    saved = json.loads((tmp_path / "summary_benchmark_L1_P50.json").read_text(encoding="utf-8"))
    assert saved["seeds"] == [1, 2]
    with pytest.raises(ValueError):
        run_seeds([])


@pytest.mark.slow
def test_planning_run(scenario):
    spec = RunSpec(scenario=scenario, demand_level=1, penetration=0.5, seed=3, mode=PLANNING,
                   duration=90.0, warmup=10.0, time_limit=0.05)
    report = run_experiment(spec)
    assert report.plans.plans > 0
    assert report.safety_violations == 0


def _summary(mode, level, penetration, delay):
    group = {"count": 10, "mean_delay": delay, "mean_fuel": 5.0, "mean_fuel_economy": 100.0,
             "mean_lane_changes": 0.5, "mean_stops": 0.2, "mean_smooth_cost": 3.0}
    per_seed = {"1": {"speed_profile": {"ALL": [10.0, None], "CAV": [12.0, 11.0], "CHV": []}}}
    return {"mode": mode, "demand_level": level, "penetration": penetration, "throughput": 900.0,
            "by_class": {"ALL": group}, "per_seed": per_seed}


def test_plot_data(tmp_path):
    results = tmp_path / "results"
    results.mkdir()
    (results / "summary_planning_L2_P40.json").write_text(
        canonical_json(_summary("planning", 2, 0.4, 20.0)), encoding="utf-8")
    (results / "summary_benchmark_L2_P40.json").write_text(
        canonical_json(_summary("benchmark", 2, 0.4, 25.0)), encoding="utf-8")
    bench_row = {"level": 2, "workers": 1, "time_limit": None, "wall_time": 0.5, "path_count": 12,
                 "gap_closed": 1.0, "verbatim": 0.1}
    (results / "bench_L2.json").write_text(canonical_json({"rows": [bench_row, {**bench_row, "wall_time": 1.5}]}),
                                           encoding="utf-8")

    written = plot_data(results, tmp_path / "figures")
    names = {path.name for path in written}
    assert {"delay.csv", "throughput.csv", "speed_profile.csv", "planning_time.csv", "optimality.csv"} <= names

    delay = pd.read_csv(tmp_path / "figures" / "delay.csv")
    assert list(delay["mode"]) == ["benchmark", "planning"]
    assert list(delay["delay"]) == [25.0, 20.0]
    timing = pd.read_csv(tmp_path / "figures" / "planning_time.csv")
    assert timing["mean_wall_time"].iloc[0] == pytest.approx(1.0)
    assert timing["problems"].iloc[0] == 2


def test_plot_data_without_inputs(tmp_path):
    assert plot_data(tmp_path, tmp_path / "figures") == []


@pytest.mark.slow
def test_planner_benchmark(scenario):
    problems = collect_planning_problems(scenario, 2, 1.0, seed=1, count=2, warmup=5.0, stride=3,
                                         max_duration=120.0)
    assert len(problems) == 2
    rows = benchmark_planner(problems, scenario, worker_counts=(1, 2), time_limits=(None,), level=2)
    assert len(rows) == 4
    for row in rows:
        assert row["best_cost"] <= row["initial_cost"] + 1e-6
        assert row["gap_closed"] is None or 0.0 <= row["gap_closed"] <= 1.0 + 1e-9


# ---------------------------------------------------------------------------
# Planner benchmarks and traffic trends
# ---------------------------------------------------------------------------

def plan_records(problems, scenario, budget):
    """Plan every problem once under `budget` and return the plan records."""
    cfg, plan, geometry = scenario.config, scenario.signal_plan, scenario.geometry
    log = InMemoryPlanLog()
    for snapshot, subject in problems:
        plan_trajectory(snapshot, subject, plan, budget, cfg, geometry=geometry, plan_log=log,
                        registry=dict(snapshot.registry))
    return log.records()


def mean_of(records, field):
    return float(np.mean([getattr(record, field) for record in records]))


@pytest.mark.slow
@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="needs four cores")
def test_four_workers_plan_faster_than_one(scenario):
    problems = collect_planning_problems(scenario, 2, 0.6, seed=2, count=50, warmup=60.0, stride=2,
                                         max_duration=1200.0)
    assert len(problems) == 50
    solver_pool(4)
    single = plan_records(problems, scenario, SearchBudget(worker_count=1))
    parallel = plan_records(problems, scenario, SearchBudget(worker_count=4))
    assert [record.best_cost for record in parallel] == pytest.approx([record.best_cost for record in single],
                                                                      abs=1e-6)
    assert mean_of(parallel, "wall_time") < mean_of(single, "wall_time")


@pytest.mark.slow
def test_load_grows_slowly_with_demand(scenario):
    """From demand level 1 to 5 trees and plan times grow by at most five times."""
    budget = SearchBudget(wall_time_limit=1.0)
    means = {}
    for level in (1, 5):
        problems = collect_planning_problems(scenario, level, 1.0, seed=3, count=20, warmup=60.0, stride=3,
                                             max_duration=900.0)
        records = plan_records(problems, scenario, budget)
        means[level] = (mean_of(records, "path_count"), mean_of(records, "wall_time"))
    assert means[1][0] > 0
    assert means[5][0] <= 5 * means[1][0]
    assert means[5][1] <= 5 * means[1][1]


@pytest.mark.slow
def test_gap_closed_grows_with_time_limit(scenario):
    problems = collect_planning_problems(scenario, 2, 0.6, seed=2, count=10, warmup=60.0, stride=4,
                                         max_duration=600.0)
    limits = (0.05, 0.5, None)
    rows = pd.DataFrame(benchmark_planner(problems, scenario, worker_counts=(1,), time_limits=limits, level=2))
    for _, group in rows.groupby("problem"):
        closed = [group[group["time_limit"].isna()] if limit is None else group[group["time_limit"] == limit]
                  for limit in limits]
        values = [frame["gap_closed"].iloc[0] for frame in closed]
        if any(pd.isna(value) for value in values):
            continue
        assert values == sorted(values)
        assert values[-1] == pytest.approx(1.0)


@pytest.mark.slow
@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="needs four cores")
def test_gap_closed_grows_with_workers(scenario):
    problems = collect_planning_problems(scenario, 2, 0.6, seed=2, count=10, warmup=60.0, stride=4,
                                         max_duration=600.0)
    rows = pd.DataFrame(benchmark_planner(problems, scenario, worker_counts=(1, 4), time_limits=(0.2,), level=2))
    rows = rows.dropna(subset=["gap_closed"])
    by_workers = rows.groupby("workers")["gap_closed"].mean()
    assert by_workers[4] >= by_workers[1]


def paired_runs(scenario, level, penetration, seed=5, duration=240.0, time_limit=0.05):
    spec = RunSpec(scenario=scenario, demand_level=level, penetration=penetration, seed=seed, mode=PLANNING,
                   duration=duration, warmup=30.0, time_limit=time_limit)
    planning = run_experiment(spec)
    benchmark = run_experiment(replace(spec, mode=BENCHMARK))
    assert planning.safety_violations == 0
    assert benchmark.safety_violations == 0
    return planning, benchmark


@pytest.mark.slow
def test_planned_cavs_drive_smoother(scenario):
    planning, benchmark = paired_runs(scenario, 2, 0.4)
    planned, human = planning.by_class["CAV"], benchmark.by_class["CAV"]
    assert planned.count > 0
    assert planned.mean_smooth_cost < human.mean_smooth_cost
    assert planned.mean_fuel < human.mean_fuel
    assert planned.mean_delay <= human.mean_delay + 0.5
    assert planned.mean_lane_changes <= human.mean_lane_changes + 0.1


@pytest.mark.slow
def test_chvs_gain_from_automated_neighbours(scenario):
    mixed = run_experiment(RunSpec(scenario=scenario, demand_level=4, penetration=0.8, seed=5, mode=PLANNING,
                                   duration=180.0, warmup=30.0, time_limit=0.02))
    human = run_experiment(RunSpec(scenario=scenario, demand_level=4, penetration=0.0, seed=5, mode=PLANNING,
                                   duration=180.0, warmup=30.0))
    assert mixed.safety_violations == 0
    assert mixed.by_class["CHV"].count > 0
    assert mixed.by_class["CHV"].mean_delay < human.by_class["CHV"].mean_delay
    assert mixed.by_class["CHV"].mean_fuel < human.by_class["CHV"].mean_fuel

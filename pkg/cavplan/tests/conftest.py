"""
Shared fixtures: parameters, signal plans and small hand-built scenes.
"""

from typing import Dict, Iterable, List, Optional

import pytest

from cavplan.behavior import SceneSnapshot
from cavplan.config import Config
from cavplan.models import (
    ApproachGeometry,
    Movement,
    PhaseWindow,
    SignalPlan,
    Trajectory,
    Vehicle,
    VehicleClass,
    VehicleState,
)
from cavplan.prediction import PredictionResult
from cavplan.scenario import trajectory_cost


@pytest.fixture
def cfg():
    """Default parameters."""
    return Config()


@pytest.fixture
def plan():
    """Default fixed-time plan: green [0, 27), yellow [27, 30), red [30, 60); lane 3 uncontrolled."""
    return SignalPlan()


@pytest.fixture
def green_plan():
    """A plan that never turns red."""
    window = PhaseWindow(green_start=0.0, green_end=60.0, yellow=0.0)
    return SignalPlan(windows={lane: window for lane in (0, 1, 2)}, cav_yellow_allowance=0.0)


@pytest.fixture
def geometry():
    return ApproachGeometry()


@pytest.fixture
def make_vehicle(cfg):
    def factory(vid: int, vclass: VehicleClass = VehicleClass.CAV, movement: Movement = Movement.THROUGH):
        return Vehicle(id=vid, vclass=vclass, movement=movement, length=cfg.vehicle_length,
                       free_flow_time=cfg.free_flow_time)
    return factory


@pytest.fixture
def make_snapshot(make_vehicle):
    """
    Snapshot from {id: state} or {id: [older states..., current]} with optional classes.
    """
    def factory(step: int, traces: Dict[int, object], classes: Optional[Dict[int, VehicleClass]] = None,
                movements: Optional[Dict[int, Movement]] = None, registry=None, observers=None,
                last_change=None) -> SceneSnapshot:
        classes = classes or {}
        movements = movements or {}
        states, history, vehicles = {}, {}, {}
        for vid, trace in traces.items():
            trace = list(trace) if isinstance(trace, (list, tuple)) else [trace]
            states[vid] = trace[-1]
            history[vid] = tuple(trace)
            vehicles[vid] = make_vehicle(vid, classes.get(vid, VehicleClass.CAV),
                                         movements.get(vid, Movement.THROUGH))
        return SceneSnapshot(
            step=step,
            states=states,
            vehicles=vehicles,
            history=history,
            registry=registry or {},
            last_change=last_change or {},
            observers=observers or {},
        )
    return factory


@pytest.fixture
def make_prediction(cfg, make_vehicle):
    """PredictionResult from per-vehicle state lists covering the same steps."""
    def factory(subject: int, traces: Dict[int, List[VehicleState]], preceding: Iterable[int] = (),
                movement: Movement = Movement.THROUGH) -> PredictionResult:
        trajectories = {vid: Trajectory.from_states(states, cfg) for vid, states in traces.items()}
        initial = trajectories[subject]
        vehicles = {vid: make_vehicle(vid) for vid in traces}
        vehicles[subject] = make_vehicle(subject, movement=movement)
        return PredictionResult(
            subject=subject,
            t0=initial.start_step,
            horizon_steps=len(initial) - 1,
            trajectories=trajectories,
            initial_subject_trajectory=initial,
            initial_cost=trajectory_cost(initial, cfg),
            cross_step=initial.cross_step if initial.cross_step is not None else initial.end_step,
            preceding=frozenset(preceding),
            vehicles=vehicles,
        )
    return factory


def constant_states(step: int, lane: int, pos: float, speed: float, count: int) -> List[VehicleState]:
    """`count` states at constant speed."""
    return [VehicleState(step=step + i, lane=lane, pos=pos + speed * i, speed=speed) for i in range(count)]


@pytest.fixture
def cruise():
    return constant_states

"""
Forward trajectory prediction around a subject CAV.

Predecessors are rolled out seeing only each other, so nothing behind them can alter
their trajectories. The subject and its followers then advance with the predecessors'
next states already committed. The subject's own rollout is the initial feasible
trajectory of the planner, and its crossing step fixes the planning horizon.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

from .behavior import SceneSnapshot, advance_vehicle
from .config import Config
from .helper_functions import setup_logging
from .models import ApproachGeometry, SignalPlan, Trajectory, Vehicle, VehicleState
from .scenario import passed_stop_bar, trajectory_cost

logger = setup_logging(__name__)


class PredictionOverflowError(RuntimeError):
    """The subject cannot cross the stop bar within the prediction cap."""

    def __init__(self, message: str, partial: Optional[Trajectory] = None):
        super().__init__(message)
        self.message = message
        self.partial = partial


@dataclass(frozen=True)
class PredictionResult:
    """Predicted trajectories over [t0, t0 + h] and the subject's initial solution."""
    subject: int
    t0: int
    horizon_steps: int
    trajectories: Mapping[int, Trajectory]
    initial_subject_trajectory: Trajectory
    initial_cost: float
    cross_step: int
    preceding: FrozenSet[int]
    vehicles: Mapping[int, Vehicle]
    history: Mapping[int, Sequence[VehicleState]] = field(default_factory=dict)
    last_change: Optional[int] = None

    @property
    def end_step(self) -> int:
        return self.t0 + self.horizon_steps

    @property
    def others(self) -> Tuple[int, ...]:
        return tuple(vid for vid in self.trajectories if vid != self.subject)

    def state_at(self, vid: int, step: int) -> Optional[VehicleState]:
        """Predicted state, or a recorded one for steps before t0."""
        trajectory = self.trajectories.get(vid)
        if trajectory is not None:
            state = trajectory.state_at(step)
            if state is not None:
                return state
            if step > trajectory.end_step:
                return None
        trace = self.history.get(vid, ())
        for state in reversed(trace):
            if state.step <= step:
                return state
        if trace:
            return trace[0]
        return trajectory.states[0] if trajectory is not None else None


def _start_state(snapshot: SceneSnapshot, vid: int) -> VehicleState:
    planned = snapshot.registry.get(vid)
    if planned is not None:
        state = planned.state_at(snapshot.step)
        if state is not None:
            return state
    return snapshot.states[vid]


class _Rollout:
    """Mutable traces of a group of vehicles advanced step by step."""

    def __init__(self, snapshot: SceneSnapshot, ids: Sequence[int], cfg: Config):
        self.snapshot = snapshot
        self.ids = list(ids)
        self.cfg = cfg
        keep = cfg.cf_steps + 1
        self.traces: Dict[int, List[VehicleState]] = {}
        self.recent: Dict[int, List[VehicleState]] = {}
        for vid in self.ids:
            self.traces[vid] = [_start_state(snapshot, vid)]
            past = [s for s in snapshot.history.get(vid, ()) if s.step < snapshot.step]
            self.recent[vid] = (past + [self.traces[vid][0]])[-keep:]
        self.last_change = {vid: snapshot.last_change.get(vid) for vid in self.ids}

    def scene(self, step: int, committed: Optional[Dict[int, VehicleState]] = None,
              extra: Optional["_Rollout"] = None) -> SceneSnapshot:
        states = {vid: self.traces[vid][-1] for vid in self.ids}
        history = {vid: tuple(self.recent[vid]) for vid in self.ids}
        last_change = dict(self.last_change)
        if extra is not None:
            states.update({vid: extra.traces[vid][-1] for vid in extra.ids})
            history.update({vid: tuple(extra.recent[vid]) for vid in extra.ids})
            last_change.update(extra.last_change)
        return SceneSnapshot(
            step=step,
            states=states,
            vehicles=self.snapshot.vehicles,
            history=history,
            registry=self.snapshot.registry,
            last_change=last_change,
            committed=dict(committed or {}),
            observers=self.snapshot.observers,
        )

    def advance(self, scene: SceneSnapshot, plan: SignalPlan, geometry: ApproachGeometry) -> Dict[int, VehicleState]:
        """Advance this group front-to-back inside `scene`; returns the new next states."""
        step = scene.step
        decided: Dict[int, VehicleState] = {}
        for vid in scene.ordered_ids:
            if vid not in self.traces:
                continue
            planned = scene.registry.get(vid)
            replay = planned.state_at(step + 1) if planned is not None else None
            if replay is not None and planned.state_at(step) == self.traces[vid][-1]:
                next_state = replay
                changed = replay.lane != self.traces[vid][-1].lane
            else:
                accel, next_state, changed = advance_vehicle(vid, scene, self.cfg, plan, geometry)
                self.traces[vid][-1] = replace(self.traces[vid][-1], accel=accel)
                self.recent[vid][-1] = self.traces[vid][-1]
            scene.committed[vid] = next_state
            decided[vid] = next_state
            if changed:
                self.last_change[vid] = step + 1
        keep = self.cfg.cf_steps + 1
        for vid, next_state in decided.items():
            self.traces[vid].append(next_state)
            self.recent[vid] = (self.recent[vid] + [next_state])[-keep:]
        return decided

    def trajectories(self) -> Dict[int, Trajectory]:
        t0 = self.snapshot.step
        result = {}
        for vid, trace in self.traces.items():
            first_flag = 1 if self.snapshot.last_change.get(vid) == t0 else 0
            result[vid] = Trajectory.from_states(trace, self.cfg, first_lc_flag=first_flag)
        return result


def prediction_cap(plan: SignalPlan, cfg: Config) -> int:
    """Maximum number of predicted steps before declaring overflow."""
    return int(math.ceil(cfg.max_prediction_cycles * plan.cycle / cfg.dt))


def predict_scene(snapshot: SceneSnapshot, subject: int, plan: SignalPlan, cfg: Config,
                  geometry: ApproachGeometry) -> PredictionResult:
    """
    Roll the scene forward until the subject has crossed plus τ_h steps.

    Raises:
        PredictionOverflowError: If the subject has not crossed within the cap
    """
    t0 = snapshot.step
    preceding, following = snapshot.partition(subject)
    ahead = _Rollout(snapshot, preceding, cfg)
    behind = _Rollout(snapshot, (subject,) + following, cfg)

    cap = t0 + prediction_cap(plan, cfg)
    cross_step = t0 if passed_stop_bar(snapshot.states[subject].pos, cfg) else None
    end = t0 + cfg.tau_h if cross_step is not None else None
    step = t0
    while end is None or step < end:
        if end is None and step >= cap:
            partial = behind.trajectories()[subject]
            raise PredictionOverflowError(
                f"Vehicle {subject} cannot cross within {cap - t0} steps from step {t0}",
                partial=partial,
            )
        committed = ahead.advance(ahead.scene(step), plan, geometry)
        behind.advance(behind.scene(step, committed=committed, extra=ahead), plan, geometry)
        step += 1
        if cross_step is None and passed_stop_bar(behind.traces[subject][-1].pos, cfg):
            cross_step = step
            end = step + cfg.tau_h

    trajectories = ahead.trajectories()
    trajectories.update(behind.trajectories())
    initial = trajectories[subject]
    initial_cost = trajectory_cost(initial, cfg)
    logger.debug(f"Predicted vehicle {subject} from step {t0}: crossing at {cross_step}, "
                 f"h={end - t0}, C0={initial_cost:.1f}, {len(trajectories) - 1} other vehicles")
    return PredictionResult(
        subject=subject,
        t0=t0,
        horizon_steps=end - t0,
        trajectories=trajectories,
        initial_subject_trajectory=initial,
        initial_cost=initial_cost,
        cross_step=cross_step,
        preceding=frozenset(preceding),
        vehicles=snapshot.vehicles,
        history=snapshot.history,
        last_change=snapshot.last_change.get(subject),
    )


def predecessor_replay_check(snapshot: SceneSnapshot, subject: int, plan: SignalPlan, cfg: Config,
                             geometry: ApproachGeometry,
                             prediction: Optional[PredictionResult] = None) -> bool:
    """
    Non-interference audit.

    Re-predicts the predecessors with the subject and everything behind it deleted and
    compares their trajectories with the full prediction.
    """
    prediction = prediction or predict_scene(snapshot, subject, plan, cfg, geometry)
    preceding, _ = snapshot.partition(subject)
    if not preceding:
        return True
    reduced = SceneSnapshot(
        step=snapshot.step,
        states={vid: snapshot.states[vid] for vid in preceding},
        vehicles=snapshot.vehicles,
        history={vid: snapshot.history[vid] for vid in preceding if vid in snapshot.history},
        registry={vid: traj for vid, traj in snapshot.registry.items() if vid in preceding},
        last_change={vid: snapshot.last_change.get(vid) for vid in preceding},
        observers=snapshot.observers,
    )
    alone = _Rollout(reduced, preceding, cfg)
    for step in range(prediction.t0, prediction.end_step):
        alone.advance(alone.scene(step), plan, geometry)
    for vid, trajectory in alone.trajectories().items():
        if trajectory.states != prediction.trajectories[vid].states:
            logger.warning(f"Predecessor {vid} of vehicle {subject} changed when followers were removed")
            return False
    return True

"""
Rolling-horizon world loop.

Each step plans the automated vehicles front to back, executes the first step of their
plans, advances the human-driven vehicles, checks safety, retires vehicles that left the
conflict zone and admits new arrivals.
"""

from collections import deque
from dataclasses import replace
from typing import Deque, Dict, List, Optional, Sequence

from .behavior import SceneSnapshot, accept_lane_change, admission_speed, advance_vehicle, respects_following
from .config import Config
from .demand import Arrival
from .helper_functions import setup_logging
from .models import (
    ApproachGeometry,
    Movement,
    SignalPlan,
    Trajectory,
    Vehicle,
    VehicleClass,
    VehicleRecord,
    VehicleState,
)
from .plan_log import InMemoryPlanLog, PlanLog
from .planner import SearchBudget, plan_trajectory
from .prediction import predecessor_replay_check
from .safety import SafetyViolation, SafetyViolationError, check_world_safety, forensic_trace
from .scenario import in_no_changing_zone, passed_stop_bar, signal_red

logger = setup_logging(__name__)

_TOL = 1e-6


class World:
    """
    Mutable simulation state of one approach.

    With `planning_enabled` off every vehicle follows the human-driver models (benchmark
    mode). With `strict` on, a safety violation raises SafetyViolationError.
    """

    def __init__(self, cfg: Config, plan: SignalPlan, geometry: ApproachGeometry,
                 arrivals: Sequence[Arrival] = (), *, planning_enabled: bool = True,
                 budget: Optional[SearchBudget] = None, plan_log: Optional[PlanLog] = None,
                 strict: bool = True, audit_predecessors: bool = False):
        self.cfg = cfg
        self.plan = plan
        self.geometry = geometry
        self.planning_enabled = planning_enabled
        self.budget = budget or SearchBudget()
        self.plan_log = plan_log if plan_log is not None else InMemoryPlanLog()
        self.strict = strict
        self.audit_predecessors = audit_predecessors
        self.clock = 0
        self.records: Dict[int, VehicleRecord] = {}
        self.retired: List[VehicleRecord] = []
        self.registry: Dict[int, Trajectory] = {}
        self.violations: List[SafetyViolation] = []
        self.admitted: Dict[str, int] = {"CAV": 0, "CHV": 0}
        self.admitted_by_movement: Dict[str, int] = {movement.value: 0 for movement in Movement}
        self.plan_calls = 0
        self.audit_failures = 0
        self._pending: Deque[Arrival] = deque(sorted(arrivals, key=lambda a: (a.time, a.vehicle_id)))
        self._queues: Dict[int, Deque[Arrival]] = {lane: deque() for lane in geometry.lanes}
        self._max_queue = 0

    # ------------------------------------------------------------------
    # Views
    # ------------------------------------------------------------------

    def observer(self, vehicle: Vehicle) -> VehicleClass:
        if self.planning_enabled:
            return vehicle.vclass
        return VehicleClass.CHV

    @property
    def queued(self) -> int:
        return sum(len(queue) for queue in self._queues.values())

    def snapshot(self) -> SceneSnapshot:
        """Current states with τ_cf steps of history and the plan registry."""
        keep = self.cfg.cf_steps + 1
        states, history, vehicles, last_change, observers = {}, {}, {}, {}, {}
        for vid, record in self.records.items():
            states[vid] = record.state
            history[vid] = tuple(record.history[-keep:])
            vehicles[vid] = record.vehicle
            last_change[vid] = record.last_change_step
            observers[vid] = self.observer(record.vehicle)
        return SceneSnapshot(
            step=self.clock,
            states=states,
            vehicles=vehicles,
            history=history,
            registry=self.registry,
            last_change=last_change,
            observers=observers,
        )

    # ------------------------------------------------------------------
    # Step
    # ------------------------------------------------------------------

    def step(self) -> None:
        """Advance the world from `clock` to `clock + 1`."""
        t = self.clock
        if self.planning_enabled:
            self._plan_all()
        snapshot = self.snapshot()
        decided: Dict[int, tuple] = {}
        cavs = [vid for vid in snapshot.ordered_ids if snapshot.observer(vid) is VehicleClass.CAV]
        others = [vid for vid in snapshot.ordered_ids if snapshot.observer(vid) is not VehicleClass.CAV]
        for vid in cavs:
            decided[vid] = self._execute_cav(vid, snapshot)
            snapshot.committed[vid] = decided[vid][1]
        for vid in others:
            accel, next_state, changed = advance_vehicle(vid, snapshot, self.cfg, self.plan, self.geometry)
            decided[vid] = (accel, next_state, changed)
            snapshot.committed[vid] = next_state

        for vid, (accel, next_state, changed) in decided.items():
            record = self.records[vid]
            record.history[-1] = replace(record.history[-1], accel=accel)
            record.history.append(next_state)
            if changed:
                record.last_change_step = t + 1
        self.clock = t + 1

        self._check_safety()
        self._retire()
        self._admit()

    def run(self, steps: int) -> None:
        for _ in range(steps):
            self.step()

    def _plan_all(self) -> None:
        snapshot = self.snapshot()
        for vid in snapshot.ordered_ids:
            record = self.records[vid]
            if record.vehicle.vclass is not VehicleClass.CAV:
                continue
            state = record.state
            if state.pos < 0 or passed_stop_bar(state.pos, self.cfg):
                continue
            # Later subjects see plans registered earlier in this loop through the shared registry.
            previous = self.registry.get(vid)
            scene = replace(snapshot, committed={})
            plan_trajectory(scene, vid, self.plan, self.budget, self.cfg, geometry=self.geometry,
                            previous=previous, plan_log=self.plan_log, registry=self.registry)
            self.plan_calls += 1
            record.planned_steps += 1
            if self.audit_predecessors:
                if not predecessor_replay_check(scene, vid, self.plan, self.cfg, self.geometry):
                    self.audit_failures += 1

    def _execute_cav(self, vid: int, snapshot: SceneSnapshot) -> tuple:
        """Next step of a CAV: its registered plan when it passes the checks, the model otherwise."""
        record = self.records[vid]
        planned = self.registry.get(vid)
        if planned is not None:
            current = planned.state_at(self.clock)
            proposed = planned.state_at(self.clock + 1)
            if proposed is not None and current is not None and _matches(current, record.state):
                problem = self._execution_problem(vid, record, proposed, snapshot)
                if problem is None:
                    accel = (proposed.speed - record.state.speed) / self.cfg.dt
                    return accel, proposed, proposed.lane != record.state.lane
                record.overrides += 1
                logger.warning(f"Plan of vehicle {vid} rejected at step {self.clock}: {problem}")
            self.registry.pop(vid, None)
        return advance_vehicle(vid, snapshot, self.cfg, self.plan, self.geometry)

    def _execution_problem(self, vid: int, record: VehicleRecord, proposed: VehicleState,
                           snapshot: SceneSnapshot) -> Optional[str]:
        cfg = self.cfg
        state = record.state
        if proposed.speed < -_TOL or proposed.speed > cfg.speed_limit + _TOL:
            return f"speed {proposed.speed:.3f} out of range"
        if passed_stop_bar(proposed.pos, cfg) and proposed.speed > cfg.conflict_speed_limit + _TOL:
            return f"speed {proposed.speed:.3f} above the conflict-zone limit"
        leader = snapshot.leader_of(vid, proposed.lane)
        shifted = snapshot.shifted_state(leader, self.clock + 1 - cfg.cf_steps)
        if not respects_following(proposed, shifted, cfg):
            return f"unsafe spacing behind vehicle {leader}"
        if (not passed_stop_bar(state.pos, cfg) and passed_stop_bar(proposed.pos, cfg)
                and signal_red(self.plan, proposed.lane, self.clock + 1, VehicleClass.CAV)):
            return "crossing on red"
        if proposed.lane != state.lane:
            if abs(proposed.lane - state.lane) != 1:
                return f"lane jump {state.lane} -> {proposed.lane}"
            last = record.last_change_step
            if last is not None and self.clock + 1 - last < cfg.lc_steps:
                return "lane change too soon after the previous one"
            if in_no_changing_zone(proposed.pos, cfg):
                return "lane change inside the no-changing zone"
            if accept_lane_change(snapshot, vid, proposed.lane, cfg, next_state=proposed) is None:
                return f"gap in lane {proposed.lane} no longer acceptable"
        return None

    def _check_safety(self) -> None:
        violations = check_world_safety(self)
        if not violations:
            return
        self.violations.extend(violations)
        for violation in violations:
            logger.error(str(violation))
        if self.strict:
            trace = forensic_trace(self, {v.vehicle_id for v in violations})
            raise SafetyViolationError(
                f"{len(violations)} safety violation(s) at step {self.clock}",
                violations=violations,
                trace=trace,
            )

    def _retire(self) -> None:
        cfg = self.cfg
        for vid in [vid for vid, record in self.records.items() if record.state.pos > cfg.exit_pos]:
            record = self.records.pop(vid)
            before, after = record.history[-2], record.history[-1]
            span = after.pos - before.pos
            fraction = (cfg.exit_pos - before.pos) / span if span > 0 else 1.0
            fraction = min(1.0, max(0.0, fraction))
            record.exit_time = (before.step + fraction) * cfg.dt + cfg.exit_len / cfg.speed_limit
            self.registry.pop(vid, None)
            self.retired.append(record)

    def _admit(self) -> None:
        """Queue arrivals due by now and admit at most one per lane, at x = 0."""
        cfg = self.cfg
        now = self.clock * cfg.dt
        while self._pending and self._pending[0].time <= now + 1e-9:
            arrival = self._pending.popleft()
            self._queues[arrival.lane].append(arrival)
        snapshot = self.snapshot()
        for lane, queue in self._queues.items():
            if not queue:
                continue
            occupants = [vid for vid in snapshot.ordered_ids if snapshot.states[vid].lane == lane]
            leader_shift = None
            if occupants:
                last = occupants[-1]
                leader_shift = snapshot.shifted_state(last, self.clock - cfg.cf_steps)
                if leader_shift is None or leader_shift.step > self.clock - cfg.cf_steps:
                    continue
            speed = admission_speed(leader_shift, cfg)
            if speed is None:
                continue
            arrival = queue.popleft()
            vehicle = Vehicle(id=arrival.vehicle_id, vclass=arrival.vclass, movement=arrival.movement,
                              length=cfg.vehicle_length, entry_step=self.clock,
                              free_flow_time=cfg.free_flow_time)
            state = VehicleState(step=self.clock, lane=lane, pos=0.0, speed=speed)
            self.records[vehicle.id] = VehicleRecord(vehicle=vehicle, scheduled_time=arrival.time, history=[state])
            self.admitted[vehicle.vclass.value] += 1
            self.admitted_by_movement[vehicle.movement.value] += 1
        queued = self.queued
        if queued > self._max_queue and queued >= 10 and queued % 10 == 0:
            logger.warning(f"Entry queue holds {queued} vehicles at step {self.clock}")
        self._max_queue = max(self._max_queue, queued)

    def drain_pending(self) -> int:
        """Arrivals never admitted (still scheduled or queued)."""
        return len(self._pending) + self.queued


def _matches(a: VehicleState, b: VehicleState) -> bool:
    return a.lane == b.lane and abs(a.pos - b.pos) <= _TOL and abs(a.speed - b.speed) <= _TOL

"""
Per-step safety suite of the simulated world.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional

from .behavior import SceneSnapshot
from .config import Config
from .helper_functions import setup_logging
from .models import SignalPhase, SignalPlan, VehicleClass, VehicleRecord, VehicleState
from .scenario import in_no_changing_zone, max_speed_within, passed_stop_bar, signal_phase, signal_red

if TYPE_CHECKING:
    from .world import World

logger = setup_logging(__name__)

_TOL = 1e-6

SPACING = "spacing"
RED_CROSSING = "red_crossing"
NO_CHANGE_ZONE = "no_change_zone"
CHANGE_SEPARATION = "change_separation"
SPEED = "speed"


@dataclass(frozen=True)
class SafetyViolation:
    kind: str
    vehicle_id: int
    step: int
    detail: str

    def __str__(self) -> str:
        return f"[{self.kind}] vehicle {self.vehicle_id} at step {self.step}: {self.detail}"


class SafetyViolationError(Exception):
    """Raised by a strict world when the safety suite fails; carries a forensic trace."""

    def __init__(self, message: str, violations: List[SafetyViolation], trace: Optional[Dict] = None):
        super().__init__(message)
        self.message = message
        self.violations = violations
        self.trace = trace or {}


def _previous_change(history: List[VehicleState], before: int) -> Optional[int]:
    """Step of the last lane change strictly before index `before` of the history."""
    for i in range(before - 1, 0, -1):
        if history[i].lane != history[i - 1].lane:
            return history[i].step
    return None


def could_stop(state: VehicleState, cfg: Config) -> bool:
    """Whether the vehicle can still stop at the stop bar from `state`."""
    lowest = max(0.0, state.speed - cfg.decel_max * cfg.dt)
    return max_speed_within(state.pos, state.speed, cfg.control_len, 0.0, cfg) >= lowest - _TOL


def check_transition(record: VehicleRecord, snapshot: SceneSnapshot, observer: VehicleClass,
                     plan: SignalPlan, cfg: Config) -> List[SafetyViolation]:
    """
    Check the last step of one vehicle.

    `snapshot` holds everyone's new states, with history reaching back τ_cf steps.
    """
    history = record.history
    vid = record.vehicle.id
    now = history[-1]
    problems: List[SafetyViolation] = []

    if now.speed < -_TOL or now.speed > cfg.speed_limit + _TOL:
        problems.append(SafetyViolation(SPEED, vid, now.step, f"speed {now.speed:.4f} outside [0, {cfg.speed_limit}]"))
    elif passed_stop_bar(now.pos, cfg) and now.speed > cfg.conflict_speed_limit + _TOL:
        problems.append(SafetyViolation(SPEED, vid, now.step,
                                        f"speed {now.speed:.4f} above {cfg.conflict_speed_limit} past the stop bar"))

    leader = snapshot.leader_of(vid, now.lane)
    shifted = snapshot.shifted_state(leader, now.step - cfg.cf_steps)
    if shifted is not None and now.pos > shifted.pos - cfg.d_cf + _TOL:
        problems.append(SafetyViolation(SPACING, vid, now.step,
                                        f"x={now.pos:.3f} ahead of Newell bound {shifted.pos - cfg.d_cf:.3f} "
                                        f"behind vehicle {leader}"))

    if len(history) < 2:
        return problems
    before = history[-2]

    if not passed_stop_bar(before.pos, cfg) and passed_stop_bar(now.pos, cfg):
        if observer is VehicleClass.CAV:
            red = signal_red(plan, now.lane, now.step, VehicleClass.CAV)
        else:
            red = signal_phase(plan, now.lane, now.step) is SignalPhase.RED
        if red:
            if could_stop(before, cfg):
                problems.append(SafetyViolation(RED_CROSSING, vid, now.step, f"crossed on red in lane {now.lane}"))
            else:
                logger.warning(f"Vehicle {vid} crossed on red at step {now.step} without room to stop")

    if now.lane != before.lane:
        if in_no_changing_zone(now.pos, cfg):
            problems.append(SafetyViolation(NO_CHANGE_ZONE, vid, now.step,
                                            f"changed lane at x={now.pos:.3f} inside the no-changing zone"))
        last = _previous_change(history, len(history) - 1)
        if last is not None and now.step - last < cfg.lc_steps:
            problems.append(SafetyViolation(CHANGE_SEPARATION, vid, now.step,
                                            f"changed lane {now.step - last} steps after the previous change"))
        if abs(now.lane - before.lane) != 1:
            problems.append(SafetyViolation(CHANGE_SEPARATION, vid, now.step,
                                            f"jumped from lane {before.lane} to lane {now.lane}"))
    return problems


def check_world_safety(world: "World") -> List[SafetyViolation]:
    """Run the safety suite on the transition into the world's current step."""
    snapshot = world.snapshot()
    violations: List[SafetyViolation] = []
    for vid in snapshot.ordered_ids:
        record = world.records[vid]
        violations.extend(check_transition(record, snapshot, snapshot.observer(vid), world.plan, world.cfg))
    return violations


def forensic_trace(world: "World", vehicle_ids, steps: int = 10) -> Dict:
    """Last `steps` states of the given vehicles and of their lane neighbours, JSON-ready."""
    involved = set(vehicle_ids)
    snapshot = world.snapshot()
    for vid in list(involved):
        if vid in snapshot.states:
            lane = snapshot.states[vid].lane
            involved.update(snapshot.neighbors(vid, lane))
    trace = {}
    for vid in sorted(v for v in involved if v in world.records):
        record = world.records[vid]
        trace[str(vid)] = {
            "class": record.vehicle.vclass.value,
            "movement": record.vehicle.movement.value,
            "states": [[s.step, s.lane, s.pos, s.speed, s.accel] for s in record.history[-steps:]],
        }
    return {"step": world.clock, "vehicles": trace}

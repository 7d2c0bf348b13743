"""
Human-driver behavior: safe-speed car following, signal response, lane changing and
yielding, plus the scene snapshot these decisions read from.

Every decision for step t -> t+1 reads states at t, the leader's Newell-shifted state
and the next states already committed by vehicles processed earlier in the same step.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .config import Config
from .helper_functions import setup_logging
from .models import (
    BACK_VIRTUAL,
    FRONT_VIRTUAL,
    ApproachGeometry,
    Lcg,
    SignalPhase,
    SignalPlan,
    Trajectory,
    Vehicle,
    VehicleClass,
    VehicleState,
)
from .scenario import (
    braking_distance,
    in_no_changing_zone,
    kinematic_step,
    lanes_to_dedicated,
    max_speed_within,
    next_red_step,
    passed_stop_bar,
    signal_phase,
    speed_cap,
    virtual_position,
)

logger = setup_logging(__name__)

_TOL = 1e-6


@dataclass(frozen=True)
class SceneSnapshot:
    """
    States of every vehicle at one step, as seen by the deciding vehicles.

    `history` holds recent states per vehicle (oldest first, current last) so Newell
    shifts longer than one step can be resolved. `committed` collects next states
    decided earlier in the step and is filled while the step is processed.
    """
    step: int
    states: Mapping[int, VehicleState]
    vehicles: Mapping[int, Vehicle]
    history: Mapping[int, Sequence[VehicleState]] = field(default_factory=dict)
    registry: Mapping[int, Trajectory] = field(default_factory=dict)
    last_change: Mapping[int, Optional[int]] = field(default_factory=dict)
    committed: Dict[int, VehicleState] = field(default_factory=dict)
    observers: Mapping[int, VehicleClass] = field(default_factory=dict)

    @cached_property
    def ordered_ids(self) -> Tuple[int, ...]:
        """Vehicle ids front-to-back; ties broken by id."""
        return tuple(sorted(self.states, key=lambda vid: (-self.states[vid].pos, vid)))

    @cached_property
    def rank(self) -> Dict[int, int]:
        return {vid: index for index, vid in enumerate(self.ordered_ids)}

    def state_at(self, vid: int) -> VehicleState:
        return self.states[vid]

    def observer(self, vid: int) -> VehicleClass:
        """Signal observer class of a vehicle (benchmark runs observe every vehicle as CHV)."""
        return self.observers.get(vid, self.vehicles[vid].vclass)

    def partition(self, subject: int) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        """Split the other vehicles into predecessors (Ω^ω) and the rest (Ω̄^ω)."""
        index = self.rank[subject]
        return self.ordered_ids[:index], self.ordered_ids[index + 1:]

    def lane_next(self, vid: int) -> int:
        """Lane at step+1 if already committed, otherwise the current lane."""
        committed = self.committed.get(vid)
        return committed.lane if committed is not None else self.states[vid].lane

    def leader_of(self, vid: int, lane: int) -> int:
        """Nearest vehicle ahead of `vid` whose next lane is `lane`."""
        index = self.rank[vid]
        for other in reversed(self.ordered_ids[:index]):
            if self.lane_next(other) == lane:
                return other
        return FRONT_VIRTUAL

    def follower_of(self, vid: int, lane: int) -> int:
        """Nearest vehicle behind `vid` whose next lane is `lane`."""
        index = self.rank[vid]
        for other in self.ordered_ids[index + 1:]:
            if self.lane_next(other) == lane:
                return other
        return BACK_VIRTUAL

    def neighbors(self, vid: int, lane: int) -> Tuple[int, int]:
        return self.leader_of(vid, lane), self.follower_of(vid, lane)

    def shifted_state(self, vid: int, step: int) -> Optional[VehicleState]:
        """
        State of `vid` at `step`, for Newell shifts.

        Falls back to the oldest known state when the vehicle entered after `step`.
        """
        if vid in (FRONT_VIRTUAL, BACK_VIRTUAL):
            return None
        trace = self.history.get(vid)
        if not trace:
            return self.states[vid]
        offset = step - trace[0].step
        if offset <= 0:
            return trace[0]
        if offset < len(trace) and trace[offset].step == step:
            return trace[offset]
        for state in reversed(trace):
            if state.step <= step:
                return state
        return trace[0]

    def position(self, vid: int, cfg: Config) -> float:
        if vid in (FRONT_VIRTUAL, BACK_VIRTUAL):
            return virtual_position(vid, cfg)
        return self.states[vid].pos


# ---------------------------------------------------------------------------
# Car following
# ---------------------------------------------------------------------------

def following_speed_bound(state: VehicleState, leader_shift: Optional[VehicleState], cfg: Config) -> float:
    """
    Largest admissible next-step speed behind a leader.

    `leader_shift` is the leader's state τ_cf earlier than the follower's next step,
    or None on an open road.
    """
    bound = min(state.speed + cfg.accel_max * cfg.dt, speed_cap(state.pos, state.speed, cfg))
    if leader_shift is not None:
        spacing_limit = leader_shift.pos - cfg.d_cf
        newell = 2 * (spacing_limit - state.pos) / cfg.dt - state.speed
        stopping = max_speed_within(state.pos, state.speed, spacing_limit,
                                    braking_distance(leader_shift.speed, cfg), cfg)
        bound = min(bound, newell, stopping)
    return bound


def _lowest_accel(state: VehicleState, cfg: Config) -> float:
    return max(-cfg.decel_max, -state.speed / cfg.dt)


def _clip_accel(accel: float, state: VehicleState, cfg: Config) -> float:
    return min(cfg.accel_max, max(_lowest_accel(state, cfg), accel))


def safe_following_accel(follower: VehicleState, leader_shift: Optional[VehicleState], cfg: Config) -> float:
    """
    Acceleration of the safe-speed model.

    The result lies in [-a_L, a_U]; when even full braking cannot restore the spacing
    conditions the command is clamped and a warning is logged.
    """
    bound = following_speed_bound(follower, leader_shift, cfg)
    wanted = (bound - follower.speed) / cfg.dt
    lowest = _lowest_accel(follower, cfg)
    if wanted < lowest - _TOL:
        logger.warning(f"Spacing unrecoverable at step {follower.step} (lane {follower.lane}, "
                       f"x={follower.pos:.2f}, v={follower.speed:.2f}); clamping to full braking")
    return _clip_accel(wanted, follower, cfg)


def respects_following(next_state: VehicleState, leader_shift: Optional[VehicleState], cfg: Config) -> bool:
    """Check a realized next state against Newell spacing and the stopping-point condition."""
    if leader_shift is None:
        return True
    limit = leader_shift.pos - cfg.d_cf
    if next_state.pos > limit + _TOL:
        return False
    stop_room = limit + braking_distance(leader_shift.speed, cfg)
    return next_state.pos + braking_distance(next_state.speed, cfg) <= stop_room + _TOL


def can_follow(state: VehicleState, leader_shift: Optional[VehicleState], cfg: Config) -> bool:
    """Whether some admissible next speed keeps `state` safe behind the leader."""
    if leader_shift is None:
        return True
    lowest_speed = max(0.0, state.speed - cfg.decel_max * cfg.dt)
    return following_speed_bound(state, leader_shift, cfg) >= lowest_speed - _TOL


# ---------------------------------------------------------------------------
# Signal response
# ---------------------------------------------------------------------------

def signal_stop_accel(state: VehicleState, cfg: Config) -> float:
    """Braking command toward a stop at the stop bar."""
    distance = cfg.control_len - state.pos
    if distance <= _TOL:
        return _lowest_accel(state, cfg)
    envelope = (max_speed_within(state.pos, state.speed, cfg.control_len, 0.0, cfg) - state.speed) / cfg.dt
    comfortable = -state.speed * state.speed / (2 * distance)
    return max(_lowest_accel(state, cfg), min(envelope, comfortable))


def chv_signal_response(state: VehicleState, plan: SignalPlan, t: int, cfg: Config,
                        lane: Optional[int] = None) -> Optional[float]:
    """
    Human response to the phase shown at step `t` (the step being reached).

    Red always brakes toward the bar; yellow brakes only if a stop at the bar is
    physically possible; green and uncontrolled lanes leave the driver alone.
    """
    if passed_stop_bar(state.pos, cfg):
        return None
    phase = signal_phase(plan, state.lane if lane is None else lane, t)
    if phase is SignalPhase.RED:
        return signal_stop_accel(state, cfg)
    if phase is SignalPhase.YELLOW:
        if braking_distance(state.speed, cfg) <= cfg.control_len - state.pos:
            return signal_stop_accel(state, cfg)
    return None


def _earliest_crossing(state: VehicleState, cfg: Config, limit: int) -> Optional[int]:
    """Step at which full acceleration first carries the vehicle past the bar."""
    current = state
    for _ in range(limit):
        speed = min(current.speed + cfg.accel_max * cfg.dt, speed_cap(current.pos, current.speed, cfg))
        current = kinematic_step(current, (speed - current.speed) / cfg.dt, cfg)
        if passed_stop_bar(current.pos, cfg):
            return current.step
    return None


def cav_signal_response(state: VehicleState, plan: SignalPlan, t: int, cfg: Config,
                        lane: Optional[int] = None) -> Optional[float]:
    """
    Anticipatory response of an automated vehicle to its effective red.

    Brakes toward the bar when the vehicle cannot be past it before the next effective
    red; proceeds when it can cross in time or cannot stop anyway.
    """
    if passed_stop_bar(state.pos, cfg):
        return None
    lane = state.lane if lane is None else lane
    red = next_red_step(plan, lane, t, VehicleClass.CAV)
    if red is None:
        return None
    crossing = _earliest_crossing(state, cfg, max(0, red - state.step))
    if crossing is not None and crossing < red:
        return None
    stop_speed = max_speed_within(state.pos, state.speed, cfg.control_len, 0.0, cfg)
    if stop_speed < max(0.0, state.speed - cfg.decel_max * cfg.dt) - _TOL:
        return None
    return signal_stop_accel(state, cfg)


# ---------------------------------------------------------------------------
# Lane changing
# ---------------------------------------------------------------------------

def _anticipated_speed(snapshot: SceneSnapshot, vid: int, lane: int, cfg: Config) -> float:
    state = snapshot.state_at(vid)
    leader = snapshot.leader_of(vid, lane)
    leader_shift = snapshot.shifted_state(leader, snapshot.step + 1 - cfg.cf_steps)
    return max(0.0, following_speed_bound(state, leader_shift, cfg))


def accept_lane_change(snapshot: SceneSnapshot, vid: int, target: int, cfg: Config,
                       next_state: Optional[VehicleState] = None) -> Optional[Lcg]:
    """
    Gap acceptance shared by human decisions and plan execution.

    Checks the gap spacing, the subject against its new leader, the new follower against
    the subject (including a follower's already committed next state) and, for human
    subjects, that no preceding automated vehicle is overtaken. When `next_state` is given
    it is checked against the new leader directly.
    """
    t = snapshot.step
    state = snapshot.state_at(vid)
    leader, follower = snapshot.neighbors(vid, target)
    if snapshot.position(leader, cfg) - snapshot.position(follower, cfg) < cfg.d_p + cfg.d_f:
        return None
    shift_step = t + 1 - cfg.cf_steps
    leader_shift = snapshot.shifted_state(leader, shift_step)
    if next_state is not None:
        if not respects_following(next_state, leader_shift, cfg):
            return None
    elif not can_follow(state, leader_shift, cfg):
        return None
    if follower not in (FRONT_VIRTUAL, BACK_VIRTUAL):
        subject_shift = snapshot.shifted_state(vid, shift_step)
        committed = snapshot.committed.get(follower)
        if committed is not None:
            if not respects_following(committed, subject_shift, cfg):
                return None
        elif not can_follow(snapshot.state_at(follower), subject_shift, cfg):
            return None
    if snapshot.observer(vid) is VehicleClass.CHV and _claimed_by_preceding_cav(snapshot, vid, target, cfg):
        return None
    return Lcg(leader=leader, follower=follower, lane=target, step=t + 1)


def _claimed_by_preceding_cav(snapshot: SceneSnapshot, vid: int, target: int, cfg: Config) -> bool:
    """Whether a planned vehicle ahead of `vid` moves into `target` within the next τ_lc."""
    rank = snapshot.rank[vid]
    for other, trajectory in snapshot.registry.items():
        if other == vid or other not in snapshot.rank or snapshot.rank[other] > rank:
            continue
        if snapshot.states[other].lane == target:
            continue
        for step in range(snapshot.step + 1, snapshot.step + 1 + cfg.lc_steps):
            planned = trajectory.state_at(step)
            if planned is None:
                break
            if planned.lane == target:
                return True
    return False


def chv_lane_change_decide(subject: int, snapshot: SceneSnapshot, t: int, cfg: Config,
                           geometry: ApproachGeometry) -> Optional[Lcg]:
    """
    Lane-change decision for a model-driven vehicle at step `t`.

    Mandatory moves toward the dedicated lanes come first; inside the dedicated lanes a
    change needs a speed gain of at least `lc_speed_gain`.
    """
    state = snapshot.state_at(subject)
    if passed_stop_bar(state.pos, cfg) or in_no_changing_zone(state.pos, cfg):
        return None
    last = snapshot.last_change.get(subject)
    if last is not None and t + 1 - last < cfg.lc_steps:
        return None

    dedicated = geometry.dedicated_lanes(snapshot.vehicles[subject].movement)
    if state.lane not in dedicated:
        candidates = [lane for lane in geometry.adjacent(state.lane)
                      if lanes_to_dedicated(lane, dedicated) < lanes_to_dedicated(state.lane, dedicated)]
    else:
        own_speed = _anticipated_speed(snapshot, subject, state.lane, cfg)
        gains = []
        for lane in geometry.adjacent(state.lane):
            if lane not in dedicated:
                continue
            gain = _anticipated_speed(snapshot, subject, lane, cfg) - own_speed
            if gain >= cfg.lc_speed_gain:
                gains.append((-gain, lane))
        candidates = [lane for _, lane in sorted(gains)]

    for target in candidates:
        gap = accept_lane_change(snapshot, subject, target, cfg)
        if gap is not None:
            return gap
    return None


def chv_yield_accel(subject: int, snapshot: SceneSnapshot, t: int, cfg: Config) -> Optional[float]:
    """
    Courtesy deceleration toward an automated vehicle that announced a merge.

    A planned change of a vehicle ahead into the subject's lane within the next τ_lc
    triggers `-yield_decel` when the subject would otherwise reach the merge point.
    """
    state = snapshot.state_at(subject)
    lane = snapshot.lane_next(subject)
    for vid, trajectory in snapshot.registry.items():
        if vid == subject or vid not in snapshot.states:
            continue
        other = snapshot.states[vid]
        if other.pos <= state.pos or abs(other.lane - lane) != 1:
            continue
        for step in range(t + 1, t + 1 + cfg.lc_steps):
            planned = trajectory.state_at(step)
            if planned is None:
                break
            if planned.lane == lane:
                reach = state.pos + state.speed * (step - t) * cfg.dt
                if reach + cfg.d_f > planned.pos:
                    return max(-cfg.yield_decel, _lowest_accel(state, cfg))
                break
            if planned.lane != other.lane:
                break
    return None


# ---------------------------------------------------------------------------
# Admission and one-vehicle advance
# ---------------------------------------------------------------------------

def _speed_for_stopping_room(room: float, cfg: Config) -> float:
    """Largest speed whose braking distance fits in `room`."""
    if room <= 0:
        return 0.0
    a, dt = cfg.decel_max, cfg.dt
    step_drop = a * dt
    n = int((2 * room / (a * dt * dt)) ** 0.5)
    while n > 0 and a * dt * dt * n * n / 2 > room:
        n -= 1
    while a * dt * dt * (n + 1) * (n + 1) / 2 <= room:
        n += 1
    speed = (room + a * dt * dt * n * (n + 1) / 2) / (dt * (n + 0.5))
    return min(max(speed, n * step_drop), (n + 1) * step_drop)


def admission_speed(lane_leader_shift: Optional[VehicleState], cfg: Config) -> Optional[float]:
    """
    Entry speed at x = 0 behind the lane's last vehicle.

    None when the Newell spacing already fails at the entry point.
    """
    if lane_leader_shift is None:
        return cfg.speed_limit
    limit = lane_leader_shift.pos - cfg.d_cf
    if limit < 0:
        return None
    room = limit + braking_distance(lane_leader_shift.speed, cfg)
    return min(cfg.speed_limit, _speed_for_stopping_room(room, cfg))


def advance_vehicle(vid: int, snapshot: SceneSnapshot, cfg: Config, plan: SignalPlan,
                    geometry: ApproachGeometry, allow_lane_change: bool = True
                    ) -> Tuple[float, VehicleState, bool]:
    """
    Model-driven advance of one vehicle from snapshot.step to the next step.

    Returns (acceleration, next state, lane changed). A lane change whose next position
    would fall inside the no-changing zone is abandoned.
    """
    t = snapshot.step
    state = snapshot.state_at(vid)
    lane = state.lane
    changed = False
    if allow_lane_change:
        gap = chv_lane_change_decide(vid, snapshot, t, cfg, geometry)
        if gap is not None:
            lane = gap.lane
            changed = True

    leader = snapshot.leader_of(vid, lane)
    leader_shift = snapshot.shifted_state(leader, t + 1 - cfg.cf_steps)
    accel = safe_following_accel(state, leader_shift, cfg)

    observer = snapshot.observer(vid)
    if observer is VehicleClass.CAV:
        response = cav_signal_response(state, plan, t + 1, cfg, lane)
    else:
        response = chv_signal_response(state, plan, t + 1, cfg, lane)
    if response is not None:
        accel = min(accel, response)
    if observer is VehicleClass.CHV and snapshot.registry:
        courtesy = chv_yield_accel(vid, snapshot, t, cfg)
        if courtesy is not None:
            accel = min(accel, courtesy)
    accel = _clip_accel(accel, state, cfg)

    next_state = kinematic_step(state, accel, cfg, lane)
    if changed and in_no_changing_zone(next_state.pos, cfg):
        return advance_vehicle(vid, snapshot, cfg, plan, geometry, allow_lane_change=False)
    return accel, next_state, changed


def lane_occupants(states: Mapping[int, VehicleState], lane: int,
                   exclude: Sequence[int] = ()) -> List[Tuple[int, float]]:
    """(id, position) pairs of a lane sorted front-to-back, ties by id."""
    pairs = [(vid, s.pos) for vid, s in states.items() if s.lane == lane and vid not in exclude]
    return sorted(pairs, key=lambda pair: (-pair[1], pair[0]))

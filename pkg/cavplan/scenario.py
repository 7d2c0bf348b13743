"""
Scenario loading, signal predicates, gap enumeration and the discrete kinematics
every other module builds on.
"""

import math
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .config import Config, ConfigurationError, field_errors_from
from .helper_functions import setup_logging
from .models import (
    BACK_VIRTUAL,
    FRONT_VIRTUAL,
    ApproachGeometry,
    Lcg,
    Movement,
    PhaseWindow,
    SignalPhase,
    SignalPlan,
    Trajectory,
    VehicleClass,
    VehicleState,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = setup_logging(__name__)

_EPS = 1e-9


# ---------------------------------------------------------------------------
# Scenario file
# ---------------------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")

    def given(self) -> Dict:
        """Keys explicitly set in the file."""
        return {key: value for key, value in self.model_dump(exclude_unset=True).items()
                if value is not None}


class GeometrySection(_Section):
    control_len: Optional[float] = None
    nochange_len: Optional[float] = None
    conflict_len: Optional[float] = None
    exit_len: Optional[float] = None
    vehicle_length: Optional[float] = None
    lanes: Optional[List[int]] = None
    dedicated: Optional[Dict[Movement, List[int]]] = None


class SignalSection(_Section):
    cycle: Optional[float] = None
    green_start: float = 0.0
    green_end: float = 27.0
    yellow: float = 3.0
    cav_yellow_allowance: Optional[float] = None
    right_turn_uncontrolled: Optional[bool] = None
    right_turn_lanes: Optional[List[int]] = None
    lane_windows: Optional[Dict[int, PhaseWindow]] = None


class DynamicsSection(_Section):
    dt: Optional[float] = None
    speed_limit: Optional[float] = None
    conflict_speed_limit: Optional[float] = None
    accel_max: Optional[float] = None
    decel_max: Optional[float] = None
    tau_lc: Optional[float] = None
    tau_cf: Optional[float] = None
    d_cf: Optional[float] = None
    d_p: Optional[float] = None
    d_f: Optional[float] = None
    yield_decel: Optional[float] = None
    lc_speed_gain: Optional[float] = None
    epsilon: Optional[float] = None
    big_m: Optional[float] = None


class WeightsSection(_Section):
    alpha1: Optional[float] = None
    alpha2: Optional[float] = None
    alpha3: Optional[float] = None
    fuel_beta0: Optional[float] = None
    fuel_beta1: Optional[float] = None
    fuel_beta2: Optional[float] = None


class SearchSection(_Section):
    tau_h: Optional[int] = None
    c1: Optional[float] = None
    c2: Optional[float] = None
    max_tree_nodes: Optional[int] = None
    extra_lane_changes: Optional[int] = None
    lane_change_stride: Optional[int] = None
    max_prediction_cycles: Optional[int] = None
    lp_tolerance: Optional[float] = None
    crossing_margin: Optional[float] = None
    threads: Optional[int] = Field(None, ge=1)
    time_limit: Optional[float] = Field(None, ge=0)


_SECTIONS = {
    "geometry": GeometrySection,
    "signal": SignalSection,
    "dynamics": DynamicsSection,
    "weights": WeightsSection,
    "search": SearchSection,
}


class Scenario(BaseModel):
    """A validated scenario: parameters, signal plan, geometry and search defaults."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    config: Config = Field(default_factory=Config)
    signal_plan: SignalPlan = Field(default_factory=SignalPlan)
    geometry: ApproachGeometry = Field(default_factory=ApproachGeometry)
    default_threads: int = Field(1, ge=1)
    default_time_limit: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def _validate(self):
        problems = []
        if abs(self.signal_plan.step_length - self.config.dt) > _EPS:
            problems.append("signal step_length must equal dt")
        missing = [lane for lane in self.geometry.lanes if lane not in self.signal_plan.lanes]
        if missing:
            problems.append(f"signal plan has no window for lanes {missing}")
        if problems:
            raise ValueError("Invalid scenario: " + "; ".join(problems))
        return self

    def to_dict(self) -> Dict:
        """JSON-ready form used for fingerprints."""
        return self.model_dump(mode="json")


def scenario_from_mapping(data: Dict) -> Scenario:
    """
    Build a Scenario from the parsed sections of a scenario document.

    Raises:
        ConfigurationError: On unknown sections or keys, or violated invariants
    """
    field_errors: Dict[str, List[str]] = {}
    sections = {}
    for name, body in data.items():
        if name not in _SECTIONS:
            field_errors.setdefault(name, []).append("unknown section")
            continue
        if not isinstance(body, dict):
            field_errors.setdefault(name, []).append("section must be a table")
            continue
        try:
            sections[name] = _SECTIONS[name](**body)
        except ValidationError as e:
            for key, messages in field_errors_from(e, name).items():
                field_errors.setdefault(key, []).extend(messages)
    if field_errors:
        raise ConfigurationError("Invalid scenario file", field_errors=field_errors)

    geometry = sections.get("geometry", GeometrySection())
    signal = sections.get("signal", SignalSection())
    search = sections.get("search", SearchSection())

    config_values = {}
    for name in ("geometry", "dynamics", "weights", "search"):
        if name in sections:
            config_values.update(sections[name].given())
    for key in ("lanes", "dedicated", "threads", "time_limit"):
        config_values.pop(key, None)
    config = Config.from_mapping(config_values)

    try:
        geometry_kwargs = {}
        if geometry.lanes is not None:
            geometry_kwargs["lanes"] = tuple(geometry.lanes)
        if geometry.dedicated is not None:
            geometry_kwargs["dedicated"] = {m: tuple(lanes) for m, lanes in geometry.dedicated.items()}
        approach = ApproachGeometry(**geometry_kwargs)
    except ValidationError as e:
        raise ConfigurationError("Invalid geometry", field_errors=field_errors_from(e, "geometry")) from e

    try:
        plan = build_signal_plan(signal, approach, config)
    except ValidationError as e:
        raise ConfigurationError("Invalid signal plan", field_errors=field_errors_from(e, "signal")) from e

    try:
        return Scenario(
            config=config,
            signal_plan=plan,
            geometry=approach,
            default_threads=search.threads or 1,
            default_time_limit=search.time_limit,
        )
    except ValidationError as e:
        raise ConfigurationError("Invalid scenario", field_errors=field_errors_from(e)) from e


def build_signal_plan(signal: SignalSection, geometry: ApproachGeometry, config: Config) -> SignalPlan:
    """Expand the [signal] section into per-lane windows over the approach lanes."""
    uncontrolled = signal.right_turn_uncontrolled if signal.right_turn_uncontrolled is not None else True
    right_lanes = tuple(signal.right_turn_lanes) if signal.right_turn_lanes is not None \
        else tuple(geometry.dedicated[Movement.RIGHT])
    common = PhaseWindow(green_start=signal.green_start, green_end=signal.green_end, yellow=signal.yellow)
    overrides = signal.lane_windows or {}
    windows = {}
    for lane in geometry.lanes:
        if uncontrolled and lane in right_lanes:
            continue
        windows[lane] = overrides.get(lane, common)
    kwargs = dict(
        windows=windows,
        right_turn_uncontrolled=uncontrolled,
        right_turn_lanes=right_lanes,
        step_length=config.dt,
    )
    if signal.cycle is not None:
        kwargs["cycle"] = signal.cycle
    if signal.cav_yellow_allowance is not None:
        kwargs["cav_yellow_allowance"] = signal.cav_yellow_allowance
    return SignalPlan(**kwargs)


def load_scenario(path: Union[str, Path]) -> Scenario:
    """
    Load a TOML scenario file.

    Omitted sections and keys take their defaults.

    Raises:
        ConfigurationError: If the file is missing, unparsable or invalid
    """
    path = Path(path)
    try:
        with path.open("rb") as fp:
            data = tomllib.load(fp)
    except FileNotFoundError as e:
        raise ConfigurationError(f"Scenario file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"Cannot parse scenario file {path}: {e}") from e
    scenario = scenario_from_mapping(data)
    logger.debug(f"Loaded scenario {path} (control_len={scenario.config.control_len}, "
                 f"cycle={scenario.signal_plan.cycle})")
    return scenario


# ---------------------------------------------------------------------------
# Signal predicates
# ---------------------------------------------------------------------------

def _window(plan: SignalPlan, lane: int) -> Optional[PhaseWindow]:
    if plan.is_uncontrolled(lane):
        return None
    window = plan.windows.get(lane)
    if window is None:
        raise ConfigurationError(f"Lane {lane} is not part of the signal plan",
                                 field_errors={"lane": [f"unknown lane {lane}"]})
    return window


def _cycle_offset(plan: SignalPlan, window: PhaseWindow, t: int) -> float:
    return (t * plan.step_length - window.green_start) % plan.cycle


def signal_phase(plan: SignalPlan, lane: int, t: int) -> SignalPhase:
    """Phase shown to `lane` at step `t`."""
    window = _window(plan, lane)
    if window is None:
        return SignalPhase.UNCONTROLLED
    rel = _cycle_offset(plan, window, t)
    if rel < window.green_len - _EPS:
        return SignalPhase.GREEN
    if rel < window.green_len + window.yellow - _EPS:
        return SignalPhase.YELLOW
    return SignalPhase.RED


def signal_red(plan: SignalPlan, lane: int, t: int, observer: VehicleClass) -> bool:
    """
    r^k(t) as seen by an observer class.

    CAVs treat yellow after the crossing allowance as red; CHVs only see red as red and
    resolve yellow in their own response.
    """
    if t < 0:
        raise ValueError(f"Step must be nonnegative, got {t}")
    window = _window(plan, lane)
    if window is None:
        return False
    phase = signal_phase(plan, lane, t)
    if phase is SignalPhase.RED:
        return True
    if phase is SignalPhase.YELLOW and observer is VehicleClass.CAV:
        rel = _cycle_offset(plan, window, t)
        return rel - window.green_len >= plan.cav_yellow_allowance - _EPS
    return False


def next_red_step(plan: SignalPlan, lane: int, t: int, observer: VehicleClass) -> Optional[int]:
    """First step >= t that `observer` sees as red, or None if the lane never turns red."""
    if plan.is_uncontrolled(lane):
        return None
    _window(plan, lane)
    span = int(math.ceil(plan.cycle / plan.step_length)) + 1
    for step in range(t, t + span):
        if signal_red(plan, lane, step, observer):
            return step
    return None


# ---------------------------------------------------------------------------
# Gaps and zones
# ---------------------------------------------------------------------------

def virtual_position(vehicle_id: int, cfg: Config) -> float:
    """Fixed position of a virtual boundary vehicle."""
    if vehicle_id == FRONT_VIRTUAL:
        return cfg.big_m
    if vehicle_id == BACK_VIRTUAL:
        return -cfg.big_m
    raise ValueError(f"Vehicle {vehicle_id} is not virtual")


def enumerate_lcgs(lane_occupants: Sequence[Tuple[int, float]], lane: int, t: int) -> List[Lcg]:
    """
    Gaps of one lane at step t.

    `lane_occupants` holds (vehicle id, position) pairs sorted by decreasing position;
    the front and back virtual vehicles close the sequence.
    """
    ids = [FRONT_VIRTUAL] + [vid for vid, _ in lane_occupants] + [BACK_VIRTUAL]
    return [Lcg(leader=leader, follower=follower, lane=lane, step=t)
            for leader, follower in zip(ids, ids[1:])]


def passed_stop_bar(pos: float, cfg: Config) -> bool:
    return pos > cfg.control_len + cfg.epsilon


def in_no_changing_zone(pos: float, cfg: Config) -> bool:
    return pos > cfg.control_len - cfg.nochange_len


def lanes_to_dedicated(lane: int, dedicated: Iterable[int]) -> int:
    """Minimum number of lane changes from `lane` into the dedicated set."""
    return min(abs(lane - target) for target in dedicated)


# ---------------------------------------------------------------------------
# Discrete kinematics
# ---------------------------------------------------------------------------

def kinematic_step(state: VehicleState, accel: float, cfg: Config,
                   lane: Optional[int] = None) -> VehicleState:
    """Advance one step under constant acceleration (trapezoidal position update)."""
    speed = state.speed + accel * cfg.dt
    if -_EPS < speed < 0:
        speed = 0.0
    pos = state.pos + cfg.dt * (state.speed + speed) / 2
    return VehicleState(
        step=state.step + 1,
        lane=state.lane if lane is None else lane,
        pos=pos,
        speed=speed,
    )


def braking_distance(speed: float, cfg: Config) -> float:
    """
    Distance covered when braking at a_L every step until standstill.

    Exact for the trapezoidal update with the final step's deceleration cut so the
    speed lands on zero.
    """
    if speed <= 0:
        return 0.0
    step_drop = cfg.decel_max * cfg.dt
    n = math.floor(speed / step_drop + _EPS)
    remainder = max(0.0, speed - n * step_drop)
    return n * cfg.dt * speed - step_drop * cfg.dt * n * n / 2 + cfg.dt * remainder / 2


def max_speed_within(pos: float, speed: float, bound: float, slack: float, cfg: Config) -> float:
    """
    Largest next-step speed v' with next_pos + braking_distance(v') <= bound + slack.

    Returns a negative value when no nonnegative v' satisfies the condition.
    """
    a, dt = cfg.decel_max, cfg.dt
    room = bound + slack - pos - dt * speed / 2
    if room < 0:
        return room / dt
    unit = a * dt * dt / 2
    n = int(math.floor((-1 + math.sqrt(1 + 8 * room / (a * dt * dt))) / 2))
    while n > 0 and unit * n * (n + 1) > room:
        n -= 1
    while unit * (n + 1) * (n + 2) <= room:
        n += 1
    return room / (dt * (n + 1)) + a * dt * n / 2


def speed_cap(pos: float, speed: float, cfg: Config) -> float:
    """
    Upper bound on the next-step speed from the position-dependent limits.

    Upstream of the bar the cap keeps a deceleration envelope so the first state past
    the bar is at most the conflict-zone limit.
    """
    v_c = cfg.conflict_speed_limit
    if passed_stop_bar(pos, cfg):
        return v_c
    a, dt = cfg.decel_max, cfg.dt
    reserve = cfg.stop_bar - pos - dt * speed / 2 + v_c * v_c / (2 * a)
    if reserve <= 0:
        return v_c
    envelope = -a * dt / 2 + math.sqrt(a * a * dt * dt / 4 + 2 * a * reserve)
    return max(v_c, min(cfg.speed_limit, envelope))


def trajectory_cost(trajectory: Trajectory, cfg: Config) -> float:
    """
    Upper-level cost of a trajectory.

    α1 weighs the steps spent upstream of the bar, α2 the absolute acceleration applied
    on those steps and α3 the lane changes.
    """
    upstream = [i for i, flag in enumerate(trajectory.passed_flags) if flag]
    time_cost = len(upstream) * cfg.dt
    smooth_cost = sum(abs(trajectory.states[i].accel) for i in upstream)
    return cfg.alpha1 * time_cost + cfg.alpha2 * smooth_cost + cfg.alpha3 * trajectory.lane_changes()


def smooth_cost(trajectory: Trajectory) -> float:
    """Σ δ|a| over a trajectory."""
    return sum(abs(state.accel) for state, flag in zip(trajectory.states, trajectory.passed_flags) if flag)

"""
Data model for vehicles, states, gaps, trajectories, signal timing and approach geometry.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import Config


class VehicleClass(str, Enum):
    """Vehicle class enumeration."""
    CAV = "CAV"
    CHV = "CHV"
    VIRTUAL = "VIRTUAL"


class Movement(str, Enum):
    """Turning movement at the intersection."""
    LEFT = "LEFT"
    THROUGH = "THROUGH"
    RIGHT = "RIGHT"


class SignalPhase(str, Enum):
    """Signal indication shown to a lane."""
    GREEN = "GREEN"
    YELLOW = "YELLOW"
    RED = "RED"
    UNCONTROLLED = "UNCONTROLLED"


# Virtual boundary vehicles: one far downstream, one far upstream of every lane.
FRONT_VIRTUAL = -1
BACK_VIRTUAL = -2
VIRTUAL_IDS = (FRONT_VIRTUAL, BACK_VIRTUAL)


@dataclass(frozen=True, slots=True)
class Vehicle:
    """Static description of one vehicle."""
    id: int
    vclass: VehicleClass
    movement: Movement
    length: float
    entry_step: int = 0
    free_flow_time: float = 0.0

    @property
    def is_virtual(self) -> bool:
        return self.vclass is VehicleClass.VIRTUAL


@dataclass(frozen=True, slots=True)
class VehicleState:
    """
    Kinematic state at one step.

    `accel` is the acceleration applied from this step to the next one.
    """
    step: int
    lane: int
    pos: float
    speed: float
    accel: float = 0.0


@dataclass(frozen=True, slots=True)
class Lcg:
    """Lane-changing gap between two consecutive vehicles of a lane at a step."""
    leader: int
    follower: int
    lane: int
    step: int

    @property
    def key(self) -> Tuple[int, int, int]:
        """Sort key independent of the step."""
        return (self.lane, self.leader, self.follower)

    def label(self) -> str:
        return f"L{self.lane}:{self.leader}/{self.follower}"


@dataclass(frozen=True)
class Trajectory:
    """
    Contiguous per-step states of one vehicle.

    `passed_flags[i]` is 1 while the vehicle is upstream of the stop bar and 0 once
    past it. `lc_flags[i]` is 1 iff the lane at i differs from the lane at i - 1.
    """
    start_step: int
    states: Tuple[VehicleState, ...]
    lc_flags: Tuple[int, ...]
    passed_flags: Tuple[int, ...]
    cross_step: Optional[int] = None

    @classmethod
    def from_states(cls, states: Sequence[VehicleState], cfg: Config,
                    first_lc_flag: int = 0) -> "Trajectory":
        """Derive lane-change and stop-bar flags from a state sequence."""
        states = tuple(states)
        if not states:
            raise ValueError("Trajectory needs at least one state")
        lc_flags = [first_lc_flag]
        for prev, cur in zip(states, states[1:]):
            if cur.step != prev.step + 1:
                raise ValueError(f"Non-contiguous states at step {prev.step} -> {cur.step}")
            lc_flags.append(1 if cur.lane != prev.lane else 0)
        passed_flags = []
        cross_step = None
        upstream = 1
        for state in states:
            if upstream and state.pos > cfg.stop_bar:
                upstream = 0
                cross_step = state.step
            passed_flags.append(upstream)
        return cls(
            start_step=states[0].step,
            states=states,
            lc_flags=tuple(lc_flags),
            passed_flags=tuple(passed_flags),
            cross_step=cross_step,
        )

    @property
    def end_step(self) -> int:
        return self.start_step + len(self.states) - 1

    def state_at(self, step: int) -> Optional[VehicleState]:
        """State at an absolute step, or None outside the covered range."""
        index = step - self.start_step
        if 0 <= index < len(self.states):
            return self.states[index]
        return None

    def lane_changes(self) -> int:
        """Lane changes made after the first state."""
        return sum(self.lc_flags[1:])

    def __len__(self) -> int:
        return len(self.states)


class PhaseWindow(BaseModel):
    """Green window and yellow duration of one controlled lane, in seconds of the cycle."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    green_start: float = Field(0.0, ge=0)
    green_end: float = Field(27.0, gt=0)
    yellow: float = Field(3.0, ge=0)

    @property
    def green_len(self) -> float:
        return self.green_end - self.green_start


def _default_windows() -> Dict[int, PhaseWindow]:
    return {lane: PhaseWindow() for lane in (0, 1, 2)}


class SignalPlan(BaseModel):
    """
    Fixed-time signal plan for the approach.

    Lanes listed in `right_turn_lanes` are uncontrolled when `right_turn_uncontrolled`
    is set; every other lane needs a phase window.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    cycle: float = Field(60.0, gt=0)
    windows: Dict[int, PhaseWindow] = Field(default_factory=_default_windows)
    right_turn_uncontrolled: bool = True
    right_turn_lanes: Tuple[int, ...] = (3,)
    step_length: float = Field(1.0, gt=0, description="Seconds per step, equal to Config.dt")
    cav_yellow_allowance: float = Field(1.0, ge=0, description="Seconds of yellow a CAV may still cross in")

    @model_validator(mode="after")
    def _validate(self):
        problems = []
        for lane, window in self.windows.items():
            if not 0 <= window.green_start < self.cycle:
                problems.append(f"lane {lane}: green_start must lie within [0, cycle)")
            if window.green_end <= window.green_start:
                problems.append(f"lane {lane}: green_end must follow green_start")
            if window.green_len + window.yellow > self.cycle + 1e-9:
                problems.append(f"lane {lane}: green plus yellow exceeds the cycle")
            if self.cav_yellow_allowance > window.yellow:
                problems.append(f"lane {lane}: cav_yellow_allowance exceeds the yellow time")
        if self.right_turn_uncontrolled:
            overlap = set(self.right_turn_lanes) & set(self.windows)
            if overlap:
                problems.append(f"uncontrolled lanes {sorted(overlap)} also have phase windows")
        if problems:
            raise ValueError("Invalid signal plan: " + "; ".join(problems))
        return self

    @property
    def lanes(self) -> Tuple[int, ...]:
        """Every lane the plan knows about."""
        known = set(self.windows)
        if self.right_turn_uncontrolled:
            known |= set(self.right_turn_lanes)
        return tuple(sorted(known))

    def is_uncontrolled(self, lane: int) -> bool:
        return self.right_turn_uncontrolled and lane in self.right_turn_lanes


def _default_dedicated() -> Dict[Movement, Tuple[int, ...]]:
    return {Movement.LEFT: (0,), Movement.THROUGH: (1, 2), Movement.RIGHT: (3,)}


class ApproachGeometry(BaseModel):
    """Lane layout of the approach and the dedicated lanes of each movement."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lanes: Tuple[int, ...] = (0, 1, 2, 3)
    dedicated: Dict[Movement, Tuple[int, ...]] = Field(default_factory=_default_dedicated)

    @model_validator(mode="after")
    def _validate(self):
        problems = []
        if not self.lanes:
            problems.append("at least one lane is required")
        elif list(self.lanes) != list(range(self.lanes[0], self.lanes[0] + len(self.lanes))):
            problems.append("lanes must be consecutive integers in increasing order")
        for movement in Movement:
            lanes = self.dedicated.get(movement, ())
            if not lanes:
                problems.append(f"movement {movement.value} has no dedicated lane")
            unknown = [lane for lane in lanes if lane not in self.lanes]
            if unknown:
                problems.append(f"movement {movement.value} references unknown lanes {unknown}")
        if problems:
            raise ValueError("Invalid geometry: " + "; ".join(problems))
        return self

    def dedicated_lanes(self, movement: Movement) -> frozenset:
        """K^ω for a movement."""
        return frozenset(self.dedicated[movement])

    def adjacent(self, lane: int) -> Tuple[int, ...]:
        """Lanes one step to the left and right that exist."""
        return tuple(candidate for candidate in (lane - 1, lane + 1) if candidate in self.lanes)


@dataclass
class VehicleRecord:
    """Everything the world keeps about one admitted vehicle."""
    vehicle: Vehicle
    scheduled_time: float
    history: list = field(default_factory=list)
    last_change_step: Optional[int] = None
    exit_time: Optional[float] = None
    planned_steps: int = 0
    overrides: int = 0

    @property
    def state(self) -> VehicleState:
        return self.history[-1]

"""
Simulation and planning parameters.

All distances are meters, speeds m/s, accelerations m/s², times seconds unless a field
says steps. Defaults follow the reference experiment setup.
"""

import math
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigurationError(ValueError):
    """
    Raised when a scenario, lane reference or parameter set is invalid.

    Collects every problem so one error names all offending fields.
    """

    def __init__(self, message: str, field_errors: Optional[Dict[str, List[str]]] = None):
        """
        Initialize configuration error.

        Args:
            message: Human-readable error message
            field_errors: Optional dict mapping field names to their error messages
        """
        super().__init__(message)
        self.message = message
        self.field_errors = field_errors or {}


class Config(BaseModel):
    """
    Centralized parameters for the simulator and the planner.

    Immutable once built; safe to share across worker threads.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    # time and numerics
    dt: float = Field(1.0, gt=0, description="Seconds per simulation step")
    big_m: float = Field(1e5, gt=0, description="Position of the virtual boundary vehicles")
    epsilon: float = Field(0.1, gt=0, description="Stop-bar strictness margin (m)")
    lp_tolerance: float = Field(1e-7, gt=0, description="LP primal feasibility tolerance")
    crossing_margin: float = Field(1e-6, ge=0, description="Separation of crossing rows from l_c + epsilon (m)")

    # geometry
    control_len: float = Field(500.0, gt=0, description="Control zone length up to the stop bar (m)")
    nochange_len: float = Field(30.0, gt=0, description="No-changing zone before the stop bar (m)")
    conflict_len: float = Field(30.0, gt=0, description="Conflict zone length after the stop bar (m)")
    exit_len: float = Field(100.0, ge=0, description="Exit segment length, travelled at free flow (m)")
    vehicle_length: float = Field(4.0, gt=0, description="Vehicle length (m)")

    # dynamics
    speed_limit: float = Field(16.6, gt=0, description="Approach speed limit v_U")
    conflict_speed_limit: float = Field(10.0, gt=0, description="Speed limit after the stop bar")
    accel_max: float = Field(2.0, gt=0, description="Maximum acceleration a_U")
    decel_max: float = Field(4.0, gt=0, description="Maximum deceleration a_L (absolute value)")
    tau_lc: float = Field(5.0, gt=0, description="Minimum time between two lane changes (s)")
    tau_cf: float = Field(1.0, gt=0, description="Newell time shift (s)")
    d_cf: float = Field(6.0, gt=0, description="Newell jam spacing (m)")
    d_p: float = Field(5.0, gt=0, description="Required spacing to the gap leader (m)")
    d_f: float = Field(6.0, gt=0, description="Required spacing to the gap follower (m)")
    yield_decel: float = Field(2.0, gt=0, description="Deceleration of a human driver yielding to a CAV")
    lc_speed_gain: float = Field(1.0, ge=0, description="Speed gain required for a discretionary change")

    # cost weights
    alpha1: float = Field(1000.0, gt=0, description="Travel time weight")
    alpha2: float = Field(10.0, gt=0, description="Smoothness weight")
    alpha3: float = Field(1.0, gt=0, description="Lane change weight")

    # search
    tau_h: int = Field(5, ge=1, description="Redundant horizon steps after the predicted crossing")
    c1: float = Field(1e-4, gt=0, description="Reward performance constant")
    c2: float = Field(0.5, ge=0, description="Reward exploration constant")
    max_tree_nodes: int = Field(1_000_000, ge=1, description="Strategy tree size guard")
    max_prediction_cycles: int = Field(10, ge=1, description="Prediction cap in signal cycles")
    extra_lane_changes: int = Field(1, ge=0, description="Changes allowed beyond the mandatory ones")
    lane_change_stride: int = Field(5, ge=1, description="Steps between the lane-change slots a strategy may use")

    # fuel surrogate
    fuel_beta0: float = Field(0.12, ge=0)
    fuel_beta1: float = Field(0.02, ge=0)
    fuel_beta2: float = Field(0.05, ge=0)

    @model_validator(mode="after")
    def _validate(self):
        """
        Check cross-field invariants.
        Raises ValueError naming every violated invariant.
        """
        problems = []
        ratio = self.tau_cf / self.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            problems.append(f"tau_cf/dt must be a positive integer (got {ratio:g})")
        if not self.nochange_len < self.control_len:
            problems.append("nochange_len must be shorter than control_len")
        if not (self.alpha1 >= 10 * self.alpha2 and self.alpha2 >= 10 * self.alpha3):
            problems.append("weights must satisfy alpha1 >> alpha2 >> alpha3 (factor 10 at least)")
        if self.conflict_speed_limit > self.speed_limit:
            problems.append("conflict_speed_limit must not exceed speed_limit")
        if self.big_m <= self.control_len + self.conflict_len + self.exit_len:
            problems.append("big_m must exceed every reachable position")
        if self.epsilon >= self.d_cf:
            problems.append("epsilon must be small relative to d_cf")
        if problems:
            raise ValueError("Invalid configuration: " + "; ".join(problems))
        return self

    @property
    def cf_steps(self) -> int:
        """Newell time shift in steps."""
        return int(round(self.tau_cf / self.dt))

    @property
    def lc_steps(self) -> int:
        """Minimum number of steps between two lane changes."""
        return int(math.ceil(self.tau_lc / self.dt - 1e-9))

    @property
    def stop_bar(self) -> float:
        """Position a vehicle must strictly exceed to count as past the stop bar."""
        return self.control_len + self.epsilon

    @property
    def exit_pos(self) -> float:
        """End of the conflict zone, where vehicles leave the simulation."""
        return self.control_len + self.conflict_len

    @property
    def free_flow_time(self) -> float:
        """Unimpeded traversal time of approach, conflict zone and exit segment."""
        return (self.control_len / self.speed_limit
                + self.conflict_len / self.conflict_speed_limit
                + self.exit_len / self.speed_limit)

    @classmethod
    def from_mapping(cls, values: Dict, section: str = "") -> "Config":
        """
        Build a Config from a plain mapping, converting pydantic errors.

        Raises:
            ConfigurationError: Naming every offending field
        """
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(
                f"Invalid configuration: {e.error_count()} problem(s)",
                field_errors=field_errors_from(e, section),
            ) from e


def field_errors_from(error: ValidationError, section: str = "") -> Dict[str, List[str]]:
    """Map a pydantic ValidationError onto `section.field -> [messages]`."""
    field_errors: Dict[str, List[str]] = {}
    for item in error.errors():
        location = ".".join(str(part) for part in item.get("loc", ()) if part != "__root__")
        if section:
            location = f"{section}.{location}" if location else section
        field_errors.setdefault(location or "config", []).append(item.get("msg", "invalid"))
    return field_errors

"""
Stochastic vehicle arrivals: per-movement Poisson streams with random entry lanes.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .config import ConfigurationError
from .helper_functions import setup_logging
from .models import Movement, VehicleClass

logger = setup_logging(__name__)

# Hourly arrival rates per demand level (through, left, right).
DEMAND_LEVELS: Dict[int, Dict[Movement, float]] = {
    1: {Movement.THROUGH: 563, Movement.LEFT: 253, Movement.RIGHT: 506},
    2: {Movement.THROUGH: 1125, Movement.LEFT: 506, Movement.RIGHT: 1012},
    3: {Movement.THROUGH: 1688, Movement.LEFT: 759, Movement.RIGHT: 1518},
    4: {Movement.THROUGH: 2250, Movement.LEFT: 1012, Movement.RIGHT: 2024},
    5: {Movement.THROUGH: 2813, Movement.LEFT: 1265, Movement.RIGHT: 2530},
}

_MOVEMENT_ORDER = (Movement.THROUGH, Movement.LEFT, Movement.RIGHT)


class DemandSpec(BaseModel):
    """Arrival rates (veh/h) per movement and the share of automated vehicles."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rates: Dict[Movement, float] = Field(default_factory=lambda: dict(DEMAND_LEVELS[1]))
    cav_penetration: float = Field(0.0, ge=0, le=1)

    @classmethod
    def from_level(cls, level: int, penetration: float, scale: float = 1.0) -> "DemandSpec":
        """
        Demand of one of the five standard levels, with every rate multiplied by `scale`.

        Raises:
            ConfigurationError: If the level is unknown or the scale is negative
        """
        if level not in DEMAND_LEVELS:
            raise ConfigurationError(f"Unknown demand level {level}",
                                     field_errors={"demand_level": [f"must be one of {sorted(DEMAND_LEVELS)}"]})
        if scale < 0:
            raise ConfigurationError(f"Demand scale must be nonnegative, got {scale}",
                                     field_errors={"demand_scale": ["must be >= 0"]})
        rates = {movement: rate * scale for movement, rate in DEMAND_LEVELS[level].items()}
        return cls(rates=rates, cav_penetration=penetration)

    def rate(self, movement: Movement) -> float:
        rate = self.rates.get(movement, 0.0)
        if rate < 0:
            raise ConfigurationError(f"Arrival rate of {movement.value} is negative",
                                     field_errors={f"rates.{movement.value}": ["must be >= 0"]})
        return rate


@dataclass(frozen=True)
class Arrival:
    """One scheduled vehicle arrival at the upstream end of the control zone."""
    vehicle_id: int
    time: float
    movement: Movement
    vclass: VehicleClass
    lane: int


def generate_arrivals(demand: DemandSpec, duration: float, seed: int,
                      lanes: Sequence[int] = (0, 1, 2, 3)) -> List[Arrival]:
    """
    Poisson arrivals over [0, duration) for every movement.

    Each movement draws from its own generator seeded by (seed, movement index), and every
    arrival consumes the same draws whatever the penetration, so arrival times and lanes
    are shared by runs that differ only in penetration. Ids follow arrival time.
    """
    lanes = tuple(lanes)
    drafts = []
    for index, movement in enumerate(_MOVEMENT_ORDER):
        rate = demand.rate(movement)
        if rate <= 0:
            continue
        rng = np.random.default_rng([seed, index])
        mean_gap = 3600.0 / rate
        t = rng.exponential(mean_gap)
        while t < duration:
            is_cav = rng.random() < demand.cav_penetration
            lane = lanes[int(rng.integers(len(lanes)))]
            drafts.append((float(t), index, movement, VehicleClass.CAV if is_cav else VehicleClass.CHV, lane))
            t += rng.exponential(mean_gap)
    drafts.sort(key=lambda draft: (draft[0], draft[1]))
    arrivals = [Arrival(vehicle_id=i, time=t, movement=movement, vclass=vclass, lane=lane)
                for i, (t, _, movement, vclass, lane) in enumerate(drafts)]
    logger.debug(f"Generated {len(arrivals)} arrivals over {duration:g} s (seed {seed})")
    return arrivals

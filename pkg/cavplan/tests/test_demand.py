"""
Tests for demand levels and arrival generation.
"""

import pytest

from cavplan.config import ConfigurationError
from cavplan.demand import DEMAND_LEVELS, DemandSpec, generate_arrivals
from cavplan.models import Movement, VehicleClass


def test_demand_levels():
    spec = DemandSpec.from_level(2, 0.4)
    assert spec.rate(Movement.THROUGH) == 1125
    assert spec.rate(Movement.LEFT) == 506
    assert spec.cav_penetration == 0.4
    assert DemandSpec.from_level(2, 0.4, scale=0.5).rate(Movement.RIGHT) == pytest.approx(506.0)
    assert sorted(DEMAND_LEVELS) == [1, 2, 3, 4, 5]


@pytest.mark.parametrize("level,scale", [(0, 1.0), (6, 1.0), (1, -1.0)])
def test_invalid_demand(level, scale):
    with pytest.raises(ConfigurationError) as exc_info:
        DemandSpec.from_level(level, 0.5, scale=scale)
    assert exc_info.value.field_errors


def test_invalid_penetration():
    with pytest.raises(ValueError):
        DemandSpec(cav_penetration=1.5)


def test_arrivals_are_deterministic():
    spec = DemandSpec.from_level(3, 0.5)
    assert generate_arrivals(spec, 600.0, seed=7) == generate_arrivals(spec, 600.0, seed=7)
    assert generate_arrivals(spec, 600.0, seed=7) != generate_arrivals(spec, 600.0, seed=8)


def test_arrivals_ordered_with_sequential_ids():
    arrivals = generate_arrivals(DemandSpec.from_level(2, 0.5), 900.0, seed=1)
    assert [a.vehicle_id for a in arrivals] == list(range(len(arrivals)))
    assert all(a.time <= b.time for a, b in zip(arrivals, arrivals[1:]))
    assert all(0.0 <= a.time < 900.0 for a in arrivals)
    assert {a.lane for a in arrivals} <= {0, 1, 2, 3}


def test_arrival_count_matches_rate():
    """An hour of level 1 brings about 1322 vehicles."""
    arrivals = generate_arrivals(DemandSpec.from_level(1, 0.0), 3600.0, seed=3)
    assert 1190 <= len(arrivals) <= 1455


@pytest.mark.parametrize("penetration,expected", [(0.0, {VehicleClass.CHV}), (1.0, {VehicleClass.CAV})])
def test_penetration_extremes(penetration, expected):
    arrivals = generate_arrivals(DemandSpec.from_level(2, penetration), 600.0, seed=2)
    assert {a.vclass for a in arrivals} == expected


def test_penetration_shares_arrival_times():
    """Runs differing only in penetration see the same vehicles arrive."""
    low = generate_arrivals(DemandSpec.from_level(2, 0.2), 600.0, seed=5)
    high = generate_arrivals(DemandSpec.from_level(2, 0.8), 600.0, seed=5)
    assert [(a.time, a.movement, a.lane) for a in low] == [(a.time, a.movement, a.lane) for a in high]
    assert sum(a.vclass is VehicleClass.CAV for a in low) <= sum(a.vclass is VehicleClass.CAV for a in high)


def test_zero_rate_movement():
    spec = DemandSpec(rates={Movement.THROUGH: 600.0}, cav_penetration=0.0)
    arrivals = generate_arrivals(spec, 600.0, seed=1)
    assert {a.movement for a in arrivals} == {Movement.THROUGH}

"""
Tests for the per-step safety suite.
"""

import pytest

from cavplan.models import Movement, Vehicle, VehicleClass, VehicleRecord, VehicleState
from cavplan.safety import (
    CHANGE_SEPARATION,
    NO_CHANGE_ZONE,
    RED_CROSSING,
    SPACING,
    SPEED,
    could_stop,
    check_transition,
)

CAV, CHV = VehicleClass.CAV, VehicleClass.CHV


def s(step, lane, pos, speed):
    return VehicleState(step=step, lane=lane, pos=pos, speed=speed)


def record_of(vid, history, vclass=CHV):
    vehicle = Vehicle(id=vid, vclass=vclass, movement=Movement.THROUGH, length=4.0)
    return VehicleRecord(vehicle=vehicle, scheduled_time=0.0, history=list(history))


def kinds(cfg, plan, make_snapshot, history, observer=CHV, others=None):
    """Violation kinds of vehicle 1 with the given history."""
    traces = {1: history}
    traces.update(others or {})
    snapshot = make_snapshot(history[-1].step, traces, classes={1: observer})
    violations = check_transition(record_of(1, history, observer), snapshot, observer, plan, cfg)
    return [v.kind for v in violations]


def test_clean_transition(cfg, plan, make_snapshot):
    assert kinds(cfg, plan, make_snapshot, [s(0, 1, 100.0, 10.0), s(1, 1, 110.0, 10.0)]) == []


def test_red_crossing_that_could_have_stopped(cfg, plan, make_snapshot):
    history = [s(34, 1, 480.0, 10.0), s(35, 1, 505.0, 10.0)]
    assert could_stop(history[0], cfg)
    assert kinds(cfg, plan, make_snapshot, history) == [RED_CROSSING]


def test_red_crossing_in_dilemma_zone_is_tolerated(cfg, plan, make_snapshot):
    """A vehicle that could no longer stop is not blamed for the red."""
    history = [s(34, 1, 497.0, 10.0), s(35, 1, 505.0, 10.0)]
    assert not could_stop(history[0], cfg)
    assert kinds(cfg, plan, make_snapshot, history) == []


def test_effective_red_differs_per_observer(cfg, plan, make_snapshot):
    """Step 28 is still yellow for a human driver but red for a CAV."""
    history = [s(27, 1, 480.0, 10.0), s(28, 1, 505.0, 10.0)]
    assert kinds(cfg, plan, make_snapshot, history, observer=CHV) == []
    assert kinds(cfg, plan, make_snapshot, history, observer=CAV) == [RED_CROSSING]


def test_uncontrolled_lane_never_red(cfg, plan, make_snapshot):
    history = [s(34, 3, 480.0, 10.0), s(35, 3, 505.0, 10.0)]
    assert kinds(cfg, plan, make_snapshot, history) == []


def test_spacing_violation(cfg, plan, make_snapshot):
    leader = [s(4, 1, 100.0, 10.0), s(5, 1, 110.0, 10.0)]
    follower = [s(4, 1, 90.0, 10.0), s(5, 1, 99.0, 10.0)]
    assert kinds(cfg, plan, make_snapshot, follower, others={2: leader}) == [SPACING]
    safe = [s(4, 1, 80.0, 10.0), s(5, 1, 90.0, 10.0)]
    assert kinds(cfg, plan, make_snapshot, safe, others={2: leader}) == []


def test_change_in_no_changing_zone(cfg, plan, make_snapshot):
    history = [s(0, 1, 470.0, 10.0), s(1, 2, 480.0, 10.0)]
    assert kinds(cfg, plan, make_snapshot, history) == [NO_CHANGE_ZONE]


def test_changes_too_close(cfg, plan, make_snapshot):
    history = [s(0, 1, 100.0, 10.0), s(1, 2, 110.0, 10.0), s(2, 2, 120.0, 10.0), s(3, 1, 130.0, 10.0)]
    assert kinds(cfg, plan, make_snapshot, history) == [CHANGE_SEPARATION]


def test_lane_jump(cfg, plan, make_snapshot):
    history = [s(0, 1, 100.0, 10.0), s(1, 3, 110.0, 10.0)]
    assert kinds(cfg, plan, make_snapshot, history) == [CHANGE_SEPARATION]


@pytest.mark.parametrize("history", [
    [s(0, 1, 100.0, 16.0), s(1, 1, 117.0, 17.0)],
    [s(0, 1, 500.0, 12.0), s(1, 1, 512.0, 12.0)],
])
def test_speed_limits(cfg, green_plan, make_snapshot, history):
    assert kinds(cfg, green_plan, make_snapshot, history) == [SPEED]


def test_violation_message(cfg, plan, make_snapshot):
    history = [s(0, 1, 100.0, 10.0), s(1, 3, 110.0, 10.0)]
    snapshot = make_snapshot(1, {1: history})
    violation = check_transition(record_of(1, history), snapshot, CHV, plan, cfg)[0]
    assert str(violation).startswith("[change_separation] vehicle 1 at step 1:")

"""
Tests for the rolling-horizon world loop.
"""

import pytest

from cavplan.demand import Arrival
from cavplan.models import Movement, Trajectory, Vehicle, VehicleClass, VehicleRecord, VehicleState
from cavplan.planner import SearchBudget
from cavplan.safety import SPACING, SafetyViolationError
from cavplan.world import World

CAV, CHV = VehicleClass.CAV, VehicleClass.CHV


def arrival(vid, time, lane=1, vclass=CHV, movement=Movement.THROUGH):
    return Arrival(vehicle_id=vid, time=time, movement=movement, vclass=vclass, lane=lane)


def place(world, vid, state, vclass=CHV, movement=Movement.THROUGH):
    """Put a vehicle straight into the world."""
    vehicle = Vehicle(id=vid, vclass=vclass, movement=movement, length=world.cfg.vehicle_length,
                      free_flow_time=world.cfg.free_flow_time)
    world.records[vid] = VehicleRecord(vehicle=vehicle, scheduled_time=0.0, history=[state])


def test_empty_world(cfg, plan, geometry):
    world = World(cfg, plan, geometry)
    world.run(10)
    assert world.clock == 10
    assert world.records == {}
    assert world.violations == []


def test_admission_after_first_step(cfg, plan, geometry):
    """Arrivals due by the new clock enter at x = 0 and v_U on an empty lane."""
    world = World(cfg, plan, geometry, [arrival(0, 0.5)])
    assert world.records == {}
    world.step()
    state = world.records[0].state
    assert (state.step, state.lane, state.pos, state.speed) == (1, 1, 0.0, cfg.speed_limit)
    assert world.admitted == {"CAV": 0, "CHV": 1}
    assert world.admitted_by_movement == {"LEFT": 0, "THROUGH": 1, "RIGHT": 0}
    assert world.records[0].scheduled_time == 0.5


def test_one_admission_per_lane_per_step(cfg, plan, geometry):
    """The second vehicle waits until its leader has moved far enough."""
    world = World(cfg, plan, geometry, [arrival(0, 0.2), arrival(1, 0.4)])
    world.step()
    assert set(world.records) == {0}
    assert world.queued == 1
    world.step()
    assert set(world.records) == {0}
    world.step()
    assert set(world.records) == {0, 1}
    assert world.records[1].vehicle.entry_step == 3
    assert world.drain_pending() == 0


def test_vehicles_in_different_lanes_enter_together(cfg, plan, geometry):
    world = World(cfg, plan, geometry, [arrival(0, 0.2, lane=0, movement=Movement.LEFT), arrival(1, 0.4, lane=2)])
    world.step()
    assert set(world.records) == {0, 1}


def test_pending_counts_unadmitted(cfg, plan, geometry):
    world = World(cfg, plan, geometry, [arrival(0, 50.0)])
    world.run(3)
    assert world.drain_pending() == 1


def test_retirement(cfg, green_plan, geometry):
    """A free-flowing vehicle leaves past the conflict zone with an exit time including the exit segment."""
    world = World(cfg, green_plan, geometry, [arrival(0, 0.5)])
    world.run(45)
    assert world.records == {}
    assert len(world.retired) == 1
    retired = world.retired[0]
    assert retired.state.pos > cfg.exit_pos
    assert retired.history[-2].pos <= cfg.exit_pos
    travel = retired.exit_time - cfg.exit_len / cfg.speed_limit
    assert retired.history[-2].step <= travel <= retired.state.step


def test_benchmark_mode_never_plans(cfg, plan, geometry):
    """Every vehicle is model-driven and observes the signal like a human driver."""
    world = World(cfg, plan, geometry, [arrival(0, 0.5, vclass=CAV)], planning_enabled=False)
    world.run(5)
    assert world.plan_calls == 0
    assert world.snapshot().observer(0) is CHV
    assert world.admitted["CAV"] == 1


def test_strict_world_raises_on_violation(cfg, green_plan, geometry):
    """A left-turner with nowhere to go runs into a stopped vehicle."""
    world = World(cfg, green_plan, geometry, planning_enabled=False)
    place(world, 1, VehicleState(step=0, lane=0, pos=118.0, speed=0.0), movement=Movement.LEFT)
    place(world, 2, VehicleState(step=0, lane=0, pos=100.0, speed=16.0), movement=Movement.LEFT)
    with pytest.raises(SafetyViolationError) as exc_info:
        world.step()
    error = exc_info.value
    assert [v.kind for v in error.violations] == [SPACING]
    assert error.violations[0].vehicle_id == 2
    assert set(error.trace["vehicles"]) == {"1", "2"}
    assert error.trace["step"] == 1


def test_lenient_world_records_violation(cfg, green_plan, geometry):
    world = World(cfg, green_plan, geometry, planning_enabled=False, strict=False)
    place(world, 1, VehicleState(step=0, lane=0, pos=118.0, speed=0.0), movement=Movement.LEFT)
    place(world, 2, VehicleState(step=0, lane=0, pos=100.0, speed=16.0), movement=Movement.LEFT)
    world.step()
    assert [v.kind for v in world.violations] == [SPACING]


def test_unsafe_plan_is_overridden(cfg, green_plan, geometry):
    """A registered plan that jumps two lanes is rejected and the CAV falls back to the model."""
    world = World(cfg, green_plan, geometry)
    place(world, 1, VehicleState(step=0, lane=1, pos=100.0, speed=10.0), vclass=CAV)
    bad = [VehicleState(step=0, lane=1, pos=100.0, speed=10.0), VehicleState(step=1, lane=3, pos=110.0, speed=10.0)]
    world.registry[1] = Trajectory.from_states(bad, cfg)
    accel, next_state, changed = world._execute_cav(1, world.snapshot())
    assert world.records[1].overrides == 1
    assert 1 not in world.registry
    assert next_state.lane == 1
    assert changed is False


def test_valid_plan_is_executed(cfg, green_plan, geometry):
    world = World(cfg, green_plan, geometry)
    place(world, 1, VehicleState(step=0, lane=1, pos=100.0, speed=10.0), vclass=CAV)
    good = [VehicleState(step=0, lane=1, pos=100.0, speed=10.0), VehicleState(step=1, lane=1, pos=109.0, speed=8.0)]
    world.registry[1] = Trajectory.from_states(good, cfg)
    accel, next_state, _ = world._execute_cav(1, world.snapshot())
    assert accel == pytest.approx(-2.0)
    assert next_state == good[1]
    assert world.records[1].overrides == 0


@pytest.mark.slow
def test_planned_cav_crosses_safely(cfg, green_plan, geometry):
    """A lone CAV is planned every step until the bar and leaves without violations."""
    world = World(cfg, green_plan, geometry, [arrival(0, 0.5, vclass=CAV)],
                  budget=SearchBudget(wall_time_limit=0.5), audit_predecessors=True)
    world.run(45)
    assert world.plan_calls >= 25
    assert world.violations == []
    assert world.audit_failures == 0
    assert len(world.retired) == 1
    assert world.retired[0].overrides == 0
    assert len(world.plan_log.records()) == world.plan_calls


def test_admitted_vehicles_are_conserved(cfg, plan, geometry):
    """Per class and per movement, every admitted vehicle is either retired or still active."""
    arrivals = []
    for k in range(12):
        arrivals.append(arrival(3 * k, 4.0 * k, lane=0, vclass=CAV if k % 2 else CHV, movement=Movement.LEFT))
        arrivals.append(arrival(3 * k + 1, 4.0 * k + 1, lane=1 + k % 2, vclass=CHV if k % 3 else CAV))
        arrivals.append(arrival(3 * k + 2, 4.0 * k + 2, lane=3, movement=Movement.RIGHT))
    world = World(cfg, plan, geometry, arrivals, planning_enabled=False, strict=False)
    world.run(90)
    assert world.retired
    everyone = world.retired + list(world.records.values())
    for vclass in (CAV, CHV):
        count = sum(1 for record in everyone if record.vehicle.vclass is vclass)
        assert world.admitted[vclass.value] == count
    for movement in Movement:
        count = sum(1 for record in everyone if record.vehicle.movement is movement)
        assert world.admitted_by_movement[movement.value] == count
    assert sum(world.admitted.values()) + world.drain_pending() == len(arrivals)

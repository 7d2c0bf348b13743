"""
Tests for the lower-level acceleration program.

Small instances are checked against an exhaustive search over an integer acceleration
grid: the continuous optimum can never be worse than the best grid profile.
"""

import io
import itertools
import random

import pytest

from cavplan.models import BACK_VIRTUAL, FRONT_VIRTUAL, Lcg, Trajectory, VehicleState
from cavplan.optimizer import (
    P2Infeasible,
    P2Instance,
    P2Solution,
    build_p2,
    diagnose_infeasibility,
    replay_profile,
    solve_p2,
    total_cost,
    validate_profile,
    write_lp,
)
from cavplan.prediction import predict_scene

F, B = FRONT_VIRTUAL, BACK_VIRTUAL
LEADER_ID, FOLLOWER_ID = 7, 8


def make_instance(cfg, init, h, *, lanes=None, leader=None, follower=None, omega=False,
                  red_from=None, first_change=0):
    """
    P2 instance from plain per-offset data.

    `leader(k)` returns the Newell-shifted (position, speed, passed) of the gap leader;
    `follower` maps offsets to (position, speed).
    """
    lanes = lanes or [init.lane] * (h + 1)
    follower = follower or {}
    strategy, leader_virtual, leader_positions, leader_speeds, leader_passed = [], [], [], [], []
    follower_in_omega, follower_positions, follower_speeds, red_flags = [], [], [], []
    for k in range(h + 1):
        data = leader(k) if leader is not None else None
        strategy.append(Lcg(LEADER_ID if data else F, FOLLOWER_ID if k in follower else B, lanes[k], k))
        leader_virtual.append(data is None)
        leader_positions.append(data[0] if data else None)
        leader_speeds.append(data[1] if data else None)
        leader_passed.append(data[2] if data else False)
        follower_in_omega.append(omega and k in follower)
        follower_positions.append(follower[k][0] if k in follower else None)
        follower_speeds.append(follower[k][1] if k in follower else None)
        red_flags.append(red_from is not None and k >= red_from)
    flags = [first_change] + [1 if b != a else 0 for a, b in zip(lanes, lanes[1:])]
    return P2Instance(
        strategy=tuple(strategy),
        change_flags=tuple(flags),
        init_state=init,
        horizon=h,
        t0=0,
        leader_virtual=tuple(leader_virtual),
        leader_positions=tuple(leader_positions),
        leader_speeds=tuple(leader_speeds),
        leader_passed=tuple(leader_passed),
        follower_in_omega=tuple(follower_in_omega),
        follower_positions=tuple(follower_positions),
        follower_speeds=tuple(follower_speeds),
        red_flags=tuple(red_flags),
        subject_length=cfg.vehicle_length,
        cfg=cfg,
    )


def grid_search(instance):
    """(cost, crossing offset) of the cheapest feasible profile over accelerations {-a_L, ..., a_U} in unit steps."""
    cfg = instance.cfg
    levels = range(-int(cfg.decel_max), int(cfg.accel_max) + 1)
    best = None
    for profile in itertools.product(levels, repeat=instance.horizon):
        profile = [float(a) for a in profile]
        if validate_profile(instance, profile):
            continue
        trajectory = replay_profile(instance, profile, clamp=False)
        kc = trajectory.cross_step - instance.t0
        cost = cfg.alpha1 * kc * cfg.dt + cfg.alpha2 * sum(abs(a) for a in profile[:kc])
        if best is None or cost < best[0]:
            best = (cost, kc)
    return best


def grid_optimum(instance):
    best = grid_search(instance)
    return None if best is None else best[0]


INIT = VehicleState(step=0, lane=1, pos=470.0, speed=10.0)


def paced_leader(k):
    """A leader whose shifted position keeps the subject at exactly 10 m/s."""
    return (476.0 + 10.0 * k, 10.0, 486.0 + 10.0 * k > 500.1)


# ---------------------------------------------------------------------------
# Exactness against the grid
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("leader,red_from,expected,grid_expected", [
    (None, None, 3001.0, 3020.0),
    (paced_leader, None, 4000.0, 4000.0),
    (None, 4, 3001.0, 3020.0),
    (None, 3, None, None),
])
def test_lp_never_worse_than_grid(cfg, leader, red_from, expected, grid_expected):
    instance = make_instance(cfg, INIT, 4, leader=leader, red_from=red_from)
    solution = solve_p2(instance)
    grid = grid_optimum(instance)
    assert grid == (pytest.approx(grid_expected) if grid_expected is not None else None)
    if expected is None:
        assert isinstance(solution, P2Infeasible)
        assert not solution
        return
    assert solution.objective == pytest.approx(expected, abs=1e-3)
    assert solution.objective <= grid + 1e-4
    assert validate_profile(instance, solution.profile) == []


def random_instance(cfg, seed, h=3):
    """A small instance with a random mix of leader, follower, signal and lane change."""
    rng = random.Random(seed)
    init = VehicleState(step=0, lane=1, pos=rng.uniform(455.0, 485.0), speed=rng.uniform(6.0, 16.0))
    leader = follower = red_from = None
    lanes = None
    if rng.random() < 0.5:
        start, speed = init.pos + rng.uniform(5.0, 40.0), rng.uniform(0.0, cfg.speed_limit)

        def leader(k):
            return start + speed * k, speed, start + speed * k + cfg.d_cf > cfg.stop_bar
    if rng.random() < 0.5:
        behind, pace = init.pos - rng.uniform(8.0, 40.0), rng.uniform(6.0, cfg.speed_limit)
        follower = {k: (behind + pace * k, pace) for k in range(1, h + 1)}
    if rng.random() < 0.3:
        red_from = rng.randint(1, h)
    if rng.random() < 0.3:
        change = rng.randint(1, h)
        lanes = [1] * change + [2] * (h + 1 - change)
    return make_instance(cfg, init, h, lanes=lanes, leader=leader, follower=follower,
                         omega=rng.random() < 0.5, red_from=red_from, first_change=rng.randint(0, 1))


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(200))
def test_lp_never_worse_than_grid_on_random_instances(cfg, seed):
    instance = random_instance(cfg, seed)
    solution = solve_p2(instance, diagnose=False)
    best = grid_search(instance)
    if best is not None:
        assert isinstance(solution, P2Solution)
        assert solution.objective <= best[0] + 1e-4
        assert solution.cross_offset <= best[1]
    if isinstance(solution, P2Solution):
        assert validate_profile(instance, solution.profile) == []


def test_earliest_crossing_wins(cfg):
    """Crossing at offset 3 needs only a small speed-neutral pulse."""
    solution = solve_p2(make_instance(cfg, INIT, 4))
    assert solution.cross_offset == 3
    assert solution.time_cost == pytest.approx(3.0)
    assert solution.smooth_cost == pytest.approx(0.1, abs=1e-4)
    assert solution.states.states[3].speed <= cfg.conflict_speed_limit + 1e-6


def test_paced_leader_delays_crossing(cfg):
    solution = solve_p2(make_instance(cfg, INIT, 4, leader=paced_leader))
    assert solution.cross_offset == 4


def test_already_past_the_bar(cfg):
    init = VehicleState(step=0, lane=1, pos=505.0, speed=10.0)
    solution = solve_p2(make_instance(cfg, init, 5))
    assert solution.cross_offset == 0
    assert solution.objective == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# Infeasibility diagnosis
# ---------------------------------------------------------------------------

def test_red_is_the_binding_class(cfg):
    instance = make_instance(cfg, INIT, 4, red_from=0)
    solution = solve_p2(instance)
    assert isinstance(solution, P2Infeasible)
    assert solution.reason == "signal"


def test_stopped_leader_is_the_binding_class(cfg):
    instance = make_instance(cfg, INIT, 4, leader=lambda k: (495.0, 0.0, False))
    assert diagnose_infeasibility(instance) == "leader"
    assert solve_p2(instance).reason == "leader"


def test_horizon_too_short(cfg):
    """Nothing but the horizon keeps a far vehicle from crossing."""
    far = VehicleState(step=0, lane=1, pos=100.0, speed=10.0)
    solution = solve_p2(make_instance(cfg, far, 4))
    assert isinstance(solution, P2Infeasible)
    assert solution.reason == "horizon"
    assert solution.crossing_candidates == 0


# ---------------------------------------------------------------------------
# Row semantics
# ---------------------------------------------------------------------------

def test_merge_row(cfg):
    """After a change the new follower keeps its braking distance behind the subject."""
    init = VehicleState(step=0, lane=0, pos=100.0, speed=10.0)
    follower = {1: (101.0, 8.0), 2: (109.0, 8.0)}
    changed = make_instance(cfg, init, 2, lanes=[0, 1, 1], follower=follower)
    problems = validate_profile(changed, [-4.0, 0.0])
    assert any(problem.startswith("merge_1") for problem in problems)

    kept = make_instance(cfg, init, 2, follower=follower)
    assert not any(problem.startswith("merge_") for problem in validate_profile(kept, [-4.0, 0.0]))


def test_protected_predecessor_row(cfg):
    """A predecessor behind the subject keeps Newell spacing to the subject."""
    init = VehicleState(step=0, lane=1, pos=100.0, speed=10.0)
    instance = make_instance(cfg, init, 2, follower={1: (110.0, 10.0)}, omega=True)
    problems = validate_profile(instance, [0.0, 0.0])
    assert any(problem.startswith("protect_1") for problem in problems)


def test_nochange_row(cfg):
    init = VehicleState(step=0, lane=0, pos=465.0, speed=10.0)
    instance = make_instance(cfg, init, 2, lanes=[0, 1, 1])
    assert any(problem.startswith("nochange_1") for problem in validate_profile(instance, [0.0, 0.0]))


def test_acceleration_bounds_are_validated(cfg):
    problems = validate_profile(make_instance(cfg, INIT, 4), [3.0, 0.0, 0.0, 0.0])
    assert problems[0].startswith("accel_0")


def test_replay_profile(cfg):
    """Trapezoidal replay; lanes follow the strategy."""
    init = VehicleState(step=0, lane=0, pos=0.0, speed=10.0)
    instance = make_instance(cfg, init, 2, lanes=[0, 1, 1])
    trajectory = replay_profile(instance, [2.0, -2.0])
    assert [s.pos for s in trajectory.states] == pytest.approx([0.0, 11.0, 22.0])
    assert [s.lane for s in trajectory.states] == [0, 1, 1]
    assert trajectory.lc_flags == (0, 1, 0)


# ---------------------------------------------------------------------------
# Assembly from a prediction
# ---------------------------------------------------------------------------

def test_lone_cav_matches_prediction(cfg, green_plan, geometry, make_snapshot):
    """Without interaction the program reproduces the predicted cost."""
    snapshot = make_snapshot(0, {1: VehicleState(step=0, lane=1, pos=0.0, speed=16.6)})
    prediction = predict_scene(snapshot, 1, green_plan, cfg, geometry)
    h = prediction.horizon_steps
    strategy = [Lcg(F, B, 1, k) for k in range(h + 1)]
    instance = build_p2(prediction, strategy, snapshot.states[1], green_plan, cfg)
    assert instance.leader_virtual == (True,) * (h + 1)
    solution = solve_p2(instance)
    assert solution.cross_offset == 31
    assert solution.smooth_cost == pytest.approx(6.6, abs=1e-4)
    assert solution.objective == pytest.approx(31066.0, abs=1e-2)
    assert solution.objective <= prediction.initial_cost + 1e-4


def test_build_p2_rejects_bad_strategy(cfg, green_plan, geometry, make_snapshot):
    snapshot = make_snapshot(0, {1: VehicleState(step=0, lane=1, pos=499.0, speed=10.0)})
    prediction = predict_scene(snapshot, 1, green_plan, cfg, geometry)
    with pytest.raises(ValueError):
        build_p2(prediction, [Lcg(F, B, 1, 0)], snapshot.states[1], green_plan, cfg)
    wrong_lane = [Lcg(F, B, 2, k) for k in range(prediction.horizon_steps + 1)]
    with pytest.raises(ValueError):
        build_p2(prediction, wrong_lane, snapshot.states[1], green_plan, cfg)


def test_total_cost_adds_lane_changes(cfg):
    states = Trajectory.from_states([VehicleState(step=0, lane=0, pos=0.0, speed=10.0)], cfg)
    solution = P2Solution(profile=(0.0,), states=states, cross_step=30, time_cost=30.0, smooth_cost=0.0,
                          objective=30000.0, cfg=cfg)
    lanes = [0, 0, 1, 1, 2]
    assert total_cost(solution, [Lcg(F, B, lane, k) for k, lane in enumerate(lanes)]) == pytest.approx(30002.0)
    assert total_cost(solution, [Lcg(F, B, 0, k) for k in range(5)]) == pytest.approx(30000.0)


def test_write_lp(cfg):
    buffer = io.StringIO()
    write_lp(make_instance(cfg, INIT, 4, red_from=3), 4, buffer)
    text = buffer.getvalue()
    lines = text.splitlines()
    assert lines[0].startswith("\\ ")
    for section in ("Minimize", "Subject To", "Bounds", "End"):
        assert section in lines
    assert any(line.startswith(" red_3:") for line in lines)
    assert any(line.startswith(" complete:") for line in lines)
    assert " 0 <= p0 <= 2" in lines

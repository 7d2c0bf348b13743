"""
Lower-level acceleration optimizer.

For a fixed lane-changing strategy the program is linear once the crossing step is
fixed: δ(t) is 1 before the crossing and 0 from it on, so every big-M row either
vanishes or becomes an ordinary linear row. The solver enumerates crossing steps in
increasing order, solves one LP per candidate with HiGHS and keeps the cheapest.
Absolute accelerations are split into nonnegative parts p - n.
"""

import math
from dataclasses import dataclass
from typing import IO, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linprog

from .config import Config
from .helper_functions import setup_logging
from .models import VIRTUAL_IDS, Lcg, SignalPlan, Trajectory, VehicleClass, VehicleState
from .prediction import PredictionResult
from .scenario import braking_distance, passed_stop_bar, signal_red

logger = setup_logging(__name__)

# Constraint classes, in the order they are relaxed when diagnosing infeasibility.
FOLLOWER = "follower"
LEADER = "leader"
SIGNAL = "signal"
HORIZON = "horizon"
_DIAGNOSE_ORDER = (FOLLOWER, LEADER, SIGNAL)

_VALIDATE_TOL = 1e-6


@dataclass(frozen=True)
class P2Instance:
    """
    Lower-level program for one strategy.

    Index k runs over 0..h (absolute step t0 + k). Leader data is Newell-shifted
    (the leader's state τ_cf earlier). Follower data is shifted τ_cf later for
    predecessors (Ω^ω) and unshifted for the others.
    """
    strategy: Tuple[Lcg, ...]
    change_flags: Tuple[int, ...]
    init_state: VehicleState
    horizon: int
    t0: int
    leader_virtual: Tuple[bool, ...]
    leader_positions: Tuple[Optional[float], ...]
    leader_speeds: Tuple[Optional[float], ...]
    leader_passed: Tuple[bool, ...]
    follower_in_omega: Tuple[bool, ...]
    follower_positions: Tuple[Optional[float], ...]
    follower_speeds: Tuple[Optional[float], ...]
    red_flags: Tuple[bool, ...]
    subject_length: float
    cfg: Config

    @property
    def lanes(self) -> Tuple[int, ...]:
        return tuple(gap.lane for gap in self.strategy)

    @property
    def starts_past(self) -> bool:
        return passed_stop_bar(self.init_state.pos, self.cfg)

    def red_stop_active(self, k: int) -> bool:
        """Red-stop row at offset k (before the crossing): red and nobody ahead before the bar."""
        return self.red_flags[k] and (self.leader_virtual[k] or self.leader_passed[k])


@dataclass(frozen=True)
class P2Solution:
    profile: Tuple[float, ...]
    states: Trajectory
    cross_step: int
    time_cost: float
    smooth_cost: float
    objective: float
    cfg: Config

    @property
    def cross_offset(self) -> int:
        return self.cross_step - self.states.start_step


@dataclass(frozen=True)
class P2Infeasible:
    """No profile crosses within the horizon; `reason` names the binding constraint class."""
    reason: str
    crossing_candidates: int = 0

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class _Row:
    kind: str
    name: str
    coef: np.ndarray
    rhs: float


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def build_p2(prediction: PredictionResult, strategy: Sequence, init: VehicleState, plan: SignalPlan,
             cfg: Config, subject_length: Optional[float] = None) -> P2Instance:
    """
    Assemble the program for `strategy` (one Lcg or tree node per step t0..t0+h).

    Leader and follower data come from the prediction; steps before t0 fall back to the
    recorded history.
    """
    gaps = tuple(getattr(item, "gap", item) for item in strategy)
    h = prediction.horizon_steps
    if len(gaps) != h + 1:
        raise ValueError(f"Strategy covers {len(gaps)} steps, horizon needs {h + 1}")
    if gaps[0].lane != init.lane:
        raise ValueError(f"Strategy starts in lane {gaps[0].lane}, vehicle is in lane {init.lane}")
    t0 = prediction.t0
    c = cfg.cf_steps
    if subject_length is None:
        vehicle = prediction.vehicles.get(prediction.subject)
        subject_length = vehicle.length if vehicle is not None else cfg.vehicle_length

    leader_virtual, leader_positions, leader_speeds, leader_passed = [], [], [], []
    follower_in_omega, follower_positions, follower_speeds = [], [], []
    red_flags = []
    for k, gap in enumerate(gaps):
        step = t0 + k
        if gap.leader in VIRTUAL_IDS:
            leader_virtual.append(True)
            leader_positions.append(None)
            leader_speeds.append(None)
            leader_passed.append(False)
        else:
            shifted = prediction.state_at(gap.leader, step - c)
            now = prediction.state_at(gap.leader, step)
            leader_virtual.append(False)
            leader_positions.append(shifted.pos if shifted is not None else None)
            leader_speeds.append(shifted.speed if shifted is not None else None)
            leader_passed.append(now is not None and passed_stop_bar(now.pos, cfg))
        if gap.follower in VIRTUAL_IDS:
            follower_in_omega.append(False)
            follower_positions.append(None)
            follower_speeds.append(None)
        else:
            omega = gap.follower in prediction.preceding
            state = prediction.state_at(gap.follower, step + c if omega else step)
            if omega and step + c > prediction.end_step:
                state = None
            follower_in_omega.append(omega)
            follower_positions.append(state.pos if state is not None else None)
            follower_speeds.append(state.speed if state is not None else None)
        red_flags.append(signal_red(plan, gap.lane, step, VehicleClass.CAV))

    flags = [1 if prediction.last_change == t0 else 0]
    flags += [1 if cur.lane != prev.lane else 0 for prev, cur in zip(gaps, gaps[1:])]
    return P2Instance(
        strategy=gaps,
        change_flags=tuple(flags),
        init_state=init,
        horizon=h,
        t0=t0,
        leader_virtual=tuple(leader_virtual),
        leader_positions=tuple(leader_positions),
        leader_speeds=tuple(leader_speeds),
        leader_passed=tuple(leader_passed),
        follower_in_omega=tuple(follower_in_omega),
        follower_positions=tuple(follower_positions),
        follower_speeds=tuple(follower_speeds),
        red_flags=tuple(red_flags),
        subject_length=subject_length,
        cfg=cfg,
    )


def _position_terms(instance: P2Instance, k: int) -> Tuple[np.ndarray, float]:
    """x_k = const + coef · a."""
    cfg, h = instance.cfg, instance.horizon
    dt = cfg.dt
    coef = np.zeros(h)
    i = np.arange(k)
    coef[:k] = dt * dt * (k - i - 0.5)
    return coef, instance.init_state.pos + k * dt * instance.init_state.speed


def _speed_terms(instance: P2Instance, k: int) -> Tuple[np.ndarray, float]:
    """v_k = const + coef · a."""
    coef = np.zeros(instance.horizon)
    coef[:k] = instance.cfg.dt
    return coef, instance.init_state.speed


def _stop_segments(cfg: Config) -> int:
    return int(math.ceil(cfg.speed_limit / (cfg.decel_max * cfg.dt))) + 1


def _rows(instance: P2Instance, kc: int, dropped: FrozenSet[str] = frozenset()) -> List[_Row]:
    """All rows coef · a <= rhs for crossing offset `kc` (0 when past the bar at t0)."""
    cfg, h = instance.cfg, instance.horizon
    dt, a_l = cfg.dt, cfg.decel_max
    stop_bar = cfg.stop_bar
    margin = cfg.crossing_margin
    rows: List[_Row] = []

    for k in range(1, h + 1):
        x_coef, x_const = _position_terms(instance, k)
        v_coef, v_const = _speed_terms(instance, k)

        rows.append(_Row("speed", f"vmin_{k}", -v_coef, v_const))
        cap = cfg.conflict_speed_limit if k >= kc else cfg.speed_limit
        rows.append(_Row("speed", f"vmax_{k}", v_coef, cap - v_const))

        if LEADER not in dropped and not instance.leader_virtual[k] \
                and instance.leader_positions[k] is not None:
            limit = instance.leader_positions[k] - cfg.d_cf
            rows.append(_Row(LEADER, f"newell_{k}", x_coef, limit - x_const))
            room = limit + braking_distance(instance.leader_speeds[k], cfg)
            for n in range(_stop_segments(cfg)):
                coef = x_coef + dt * (n + 0.5) * v_coef
                const = x_const + dt * (n + 0.5) * v_const - a_l * dt * dt * n * (n + 1) / 2
                rows.append(_Row(LEADER, f"stop_{k}_{n}", coef, room - const))

        if SIGNAL not in dropped and k <= kc and instance.red_stop_active(k):
            rows.append(_Row(SIGNAL, f"red_{k}", x_coef, cfg.control_len - x_const))

        follower = instance.follower_positions[k]
        if FOLLOWER not in dropped and follower is not None:
            if instance.follower_in_omega[k]:
                rows.append(_Row(FOLLOWER, f"protect_{k}", -x_coef, x_const - follower - cfg.d_cf))
            elif instance.change_flags[k]:
                clearance = instance.follower_speeds[k] ** 2 / (2 * a_l)
                rows.append(_Row(FOLLOWER, f"merge_{k}", -x_coef, x_const - follower - clearance))

        if instance.change_flags[k]:
            rows.append(_Row("nochange", f"nochange_{k}", x_coef, cfg.control_len - cfg.nochange_len - x_const))

    if kc >= 1:
        if kc - 1 >= 1:
            x_coef, x_const = _position_terms(instance, kc - 1)
            rows.append(_Row("crossing", f"upstream_{kc - 1}", x_coef, stop_bar - margin - x_const))
        x_coef, x_const = _position_terms(instance, kc)
        rows.append(_Row("crossing", f"crossed_{kc}", -x_coef, x_const - stop_bar - margin))

    if HORIZON not in dropped:
        x_coef, x_const = _position_terms(instance, h)
        rows.append(_Row(HORIZON, "complete", -x_coef,
                         x_const - (cfg.control_len + instance.subject_length + cfg.epsilon)))
    return rows


def _bounds(instance: P2Instance):
    h, cfg = instance.horizon, instance.cfg
    return [(0.0, cfg.accel_max)] * h + [(0.0, cfg.decel_max)] * h


def _stack(rows: List[_Row], h: int) -> Tuple[np.ndarray, np.ndarray]:
    if not rows:
        return np.zeros((0, 2 * h)), np.zeros(0)
    coefs = np.vstack([row.coef for row in rows])
    return np.hstack([coefs, -coefs]), np.array([row.rhs for row in rows])


def _solve_lp(cost: np.ndarray, a_ub: np.ndarray, b_ub: np.ndarray, bounds, cfg: Config):
    return linprog(cost, A_ub=a_ub if len(b_ub) else None, b_ub=b_ub if len(b_ub) else None,
                   bounds=bounds, method="highs",
                   options={"primal_feasibility_tolerance": cfg.lp_tolerance})


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

def replay_profile(instance: P2Instance, profile: Sequence[float], clamp: bool = True) -> Trajectory:
    """Apply a profile from the initial state; lanes follow the strategy."""
    cfg = instance.cfg
    states = [VehicleState(step=instance.t0, lane=instance.init_state.lane,
                           pos=instance.init_state.pos, speed=instance.init_state.speed,
                           accel=float(profile[0]) if instance.horizon else 0.0)]
    for k in range(1, instance.horizon + 1):
        prev = states[-1]
        speed = prev.speed + cfg.dt * prev.accel
        if clamp:
            speed = min(cfg.speed_limit, max(0.0, speed))
        pos = prev.pos + cfg.dt * (prev.speed + speed) / 2
        accel = float(profile[k]) if k < instance.horizon else 0.0
        states.append(VehicleState(step=instance.t0 + k, lane=instance.strategy[k].lane,
                                   pos=pos, speed=speed, accel=accel))
    if clamp:
        states = [_consistent_accel(states, i, cfg) for i in range(len(states))]
    return Trajectory.from_states(states, cfg, first_lc_flag=instance.change_flags[0])


def _consistent_accel(states: List[VehicleState], i: int, cfg: Config) -> VehicleState:
    """Re-derive the acceleration from the (clamped) speeds."""
    if i + 1 >= len(states):
        return states[i]
    accel = (states[i + 1].speed - states[i].speed) / cfg.dt
    if accel == states[i].accel:
        return states[i]
    return VehicleState(states[i].step, states[i].lane, states[i].pos, states[i].speed, accel)


def _solution(instance: P2Instance, profile: Sequence[float]) -> P2Solution:
    cfg = instance.cfg
    trajectory = replay_profile(instance, profile)
    cross_step = trajectory.cross_step
    if cross_step is None:
        cross_step = instance.t0 + instance.horizon
    kc = cross_step - instance.t0
    smooth = sum(abs(state.accel) for state in trajectory.states[:kc])
    time_cost = kc * cfg.dt
    return P2Solution(
        profile=tuple(state.accel for state in trajectory.states),
        states=trajectory,
        cross_step=cross_step,
        time_cost=time_cost,
        smooth_cost=smooth,
        objective=cfg.alpha1 * time_cost + cfg.alpha2 * smooth,
        cfg=cfg,
    )


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------

def _crossing_candidates(instance: P2Instance) -> range:
    """Crossing offsets reachable between full braking and full acceleration."""
    cfg, h = instance.cfg, instance.horizon
    if instance.starts_past:
        return range(0, 1)
    fast = slow = (instance.init_state.pos, instance.init_state.speed)
    first, last = None, h
    for k in range(1, h + 1):
        v_fast = min(cfg.speed_limit, fast[1] + cfg.accel_max * cfg.dt)
        fast = (fast[0] + cfg.dt * (fast[1] + v_fast) / 2, v_fast)
        v_slow = max(0.0, slow[1] - cfg.decel_max * cfg.dt)
        slow = (slow[0] + cfg.dt * (slow[1] + v_slow) / 2, v_slow)
        if first is None and fast[0] >= cfg.stop_bar + cfg.crossing_margin:
            first = k
        if slow[0] > cfg.stop_bar - cfg.crossing_margin:
            last = min(last, k)
            break
    if first is None:
        return range(0)
    return range(first, last + 1)


def _solve_candidate(instance: P2Instance, kc: int, dropped: FrozenSet[str] = frozenset()):
    """Two-stage LP for one crossing offset; returns the acceleration profile or None."""
    cfg, h = instance.cfg, instance.horizon
    if h == 0:
        return ()
    a_ub, b_ub = _stack(_rows(instance, kc, dropped), h)
    bounds = _bounds(instance)
    pre = np.zeros(2 * h)
    pre[:kc] = 1.0
    pre[h:h + kc] = 1.0
    first = _solve_lp(pre, a_ub, b_ub, bounds, cfg)
    if first.status != 0:
        return None
    post = 1.0 - pre
    if not post.any():
        x = first.x
    else:
        limit = first.fun + cfg.lp_tolerance * max(1.0, abs(first.fun)) * 10
        second = _solve_lp(post, np.vstack([a_ub, pre]), np.append(b_ub, limit), bounds, cfg)
        x = second.x if second.status == 0 else first.x
    return tuple(float(p - n) for p, n in zip(x[:h], x[h:]))


def solve_p2(instance: P2Instance, diagnose: bool = True) -> Union[P2Solution, P2Infeasible]:
    """
    Exact optimum over every crossing offset, or P2Infeasible.

    Candidates are tried in increasing order and the loop stops once the time term alone
    reaches the incumbent, so the earliest crossing wins ties.
    """
    cfg = instance.cfg
    candidates = _crossing_candidates(instance)
    best: Optional[P2Solution] = None
    for kc in candidates:
        if best is not None and cfg.alpha1 * kc * cfg.dt >= best.objective:
            break
        if kc >= 1 and instance.red_stop_active(kc):
            continue
        profile = _solve_candidate(instance, kc)
        if profile is None:
            continue
        solution = _solution(instance, profile)
        if solution.cross_step != instance.t0 + kc:
            logger.debug(f"Replay crossed at {solution.cross_step}, LP fixed {instance.t0 + kc}")
        if best is None or solution.objective < best.objective - 1e-9:
            best = solution
    if best is not None:
        return best
    reason = diagnose_infeasibility(instance, candidates) if diagnose else HORIZON
    return P2Infeasible(reason=reason, crossing_candidates=len(candidates))


def diagnose_infeasibility(instance: P2Instance, candidates: Optional[range] = None) -> str:
    """Name the first constraint class whose removal makes some crossing offset feasible."""
    candidates = candidates if candidates is not None else _crossing_candidates(instance)
    dropped: FrozenSet[str] = frozenset()
    for kind in _DIAGNOSE_ORDER:
        dropped = dropped | {kind}
        for kc in candidates:
            if _solve_candidate(instance, kc, dropped) is not None:
                return kind
    return HORIZON


def total_cost(solution: P2Solution, strategy: Sequence) -> float:
    """Upper-level cost: the P2 objective plus α3 per lane change along the strategy."""
    lanes = [getattr(item, "gap", item).lane for item in strategy]
    changes = sum(1 for prev, cur in zip(lanes, lanes[1:]) if cur != prev)
    return solution.objective + solution.cfg.alpha3 * changes


# ---------------------------------------------------------------------------
# Validation and export
# ---------------------------------------------------------------------------

def validate_profile(instance: P2Instance, profile: Sequence[float]) -> List[str]:
    """
    Replay `profile` without clamping and list every violated row.

    The crossing offset is taken from the replay itself; an empty list means the profile
    is feasible for the instance.
    """
    cfg = instance.cfg
    problems = []
    for k, accel in enumerate(profile[:instance.horizon]):
        if accel > cfg.accel_max + _VALIDATE_TOL or accel < -cfg.decel_max - _VALIDATE_TOL:
            problems.append(f"accel_{k}: {accel:.6f} outside [-{cfg.decel_max}, {cfg.accel_max}]")
    trajectory = replay_profile(instance, profile, clamp=False)
    kc = 0 if instance.starts_past else (
        trajectory.cross_step - instance.t0 if trajectory.cross_step is not None else None)
    if kc is None:
        problems.append("never crosses the stop bar")
        kc = instance.horizon + 1
    a = np.asarray(profile[:instance.horizon], dtype=float)
    for row in _rows(instance, min(kc, instance.horizon)):
        if row.kind == "crossing":
            continue
        value = float(row.coef @ a)
        if value > row.rhs + _VALIDATE_TOL:
            problems.append(f"{row.name}: {value:.6f} > {row.rhs:.6f}")
    if kc == instance.horizon + 1:
        for k in range(1, instance.horizon + 1):
            if instance.red_stop_active(k) and trajectory.states[k].pos > cfg.control_len + _VALIDATE_TOL:
                problems.append(f"red_{k}: past the bar on red")
    return problems


def _lp_terms(coef: np.ndarray, h: int) -> str:
    terms = []
    for i, value in enumerate(coef):
        if value == 0:
            continue
        terms.append(f"{'+' if value > 0 else '-'} {abs(value):.12g} p{i}")
        terms.append(f"{'-' if value > 0 else '+'} {abs(value):.12g} n{i}")
    return " ".join(terms) if terms else "0 p0"


def write_lp(instance: P2Instance, crossing_offset: int, fp: IO[str]) -> None:
    """Write the stage-one LP of one crossing offset in CPLEX LP format."""
    cfg, h = instance.cfg, instance.horizon
    rows = _rows(instance, crossing_offset)
    fp.write(f"\\ Subject lane-change strategy from step {instance.t0}, horizon {h}, "
             f"crossing offset {crossing_offset}\n")
    fp.write(f"\\ Constant travel-time term: {cfg.alpha1 * crossing_offset * cfg.dt:.12g}\n")
    fp.write("Minimize\n obj:")
    objective = [f" + {cfg.alpha2:.12g} p{i} + {cfg.alpha2:.12g} n{i}" for i in range(min(crossing_offset, h))]
    fp.write("".join(objective) if objective else " 0 p0")
    fp.write("\nSubject To\n")
    for row in rows:
        fp.write(f" {row.name}: {_lp_terms(row.coef, h)} <= {row.rhs:.12g}\n")
    fp.write("Bounds\n")
    for i in range(h):
        fp.write(f" 0 <= p{i} <= {cfg.accel_max:.12g}\n")
        fp.write(f" 0 <= n{i} <= {cfg.decel_max:.12g}\n")
    fp.write("End\n")

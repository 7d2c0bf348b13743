"""
Upper-level planning: predict the scene, build the strategy tree and search it with
parallel Monte-Carlo tree search, solving the lower-level program for every selected path.
"""

import atexit
import math
import multiprocessing
import os
import threading
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, MutableMapping, Optional, Sequence, Tuple

from .behavior import SceneSnapshot
from .config import Config
from .helper_functions import setup_logging
from .lcst import (
    Lcst,
    LcstNode,
    NoStrategyError,
    TreeSizeError,
    build_lcst,
    count_strategies,
    feasible_gaps,
    lane_positions,
    root_gap,
)
from .models import VIRTUAL_IDS, ApproachGeometry, Lcg, SignalPlan, Trajectory, VehicleState
from .optimizer import P2Infeasible, P2Solution, build_p2, replay_profile, solve_p2, total_cost, validate_profile
from .plan_log import PlanLog, PlanRecord
from .prediction import PredictionOverflowError, PredictionResult, predict_scene
from .scenario import (
    kinematic_step,
    lanes_to_dedicated,
    passed_stop_bar,
    trajectory_cost,
)

logger = setup_logging(__name__)

_STATE_TOL = 1e-9
_INTERVAL_TOL = 1e-6


class SearchExhausted(Exception):
    """Every path of the tree has been selected."""


@dataclass(frozen=True)
class SearchBudget:
    """
    Wall-clock limit (None for unlimited) and number of search workers.

    With more than one worker and `process_solves` on, the lower-level solves go to a
    shared process pool while selection and backpropagation stay in the worker threads.
    """
    wall_time_limit: Optional[float] = None
    worker_count: int = 1
    process_solves: bool = True

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError(f"worker_count must be at least 1, got {self.worker_count}")
        if self.wall_time_limit is not None and self.wall_time_limit < 0:
            raise ValueError(f"wall_time_limit must be nonnegative, got {self.wall_time_limit}")


@dataclass
class SearchStats:
    paths_evaluated: int = 0
    paths_infeasible: int = 0
    best_cost: float = math.inf
    initial_cost: float = math.inf
    wall_time: float = 0.0
    path_count: int = 0
    # (elapsed seconds, best cost) each time the incumbent improved
    improvements: List[Tuple[float, float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Tree policy
# ---------------------------------------------------------------------------

def node_reward(best_cost: float, visits: int, cfg: Config) -> float:
    """R(g) = exp(-c1 f(g)) + c2 sqrt(1 / N(g))."""
    if visits < 1:
        raise ValueError(f"visits must be at least 1, got {visits}")
    return math.exp(-cfg.c1 * best_cost) + cfg.c2 * math.sqrt(1.0 / visits)


def _prune(leaf: LcstNode) -> None:
    leaf.pruned = True
    node = leaf.parent
    while node is not None and all(child.pruned for child in node.children):
        node.pruned = True
        node = node.parent


def select_path(tree: Lcst, cfg: Config) -> List[LcstNode]:
    """
    Walk from the root to a leaf taking the child with the highest reward, then prune it.

    Ties go to the lowest lane, then the lowest leader id, then the lowest follower id.

    Raises:
        SearchExhausted: If every path has already been selected
    """
    if tree.root.pruned:
        raise SearchExhausted(f"Strategy tree of vehicle {tree.subject} is exhausted")
    node = tree.root
    path = [node]
    while node.children:
        live = [child for child in node.children if not child.pruned]
        node = min(live, key=lambda child: (-node_reward(child.best_cost, child.visits, cfg), child.gap.key))
        path.append(node)
    _prune(node)
    return path


def backpropagate(path: Sequence[LcstNode], cost: Optional[float]) -> None:
    """f(g) <- min(f(g), cost) and N(g) <- N(g) + 1 along the path; None marks an infeasible path."""
    for node in path:
        node.visits += 1
        if cost is not None and cost < node.best_cost:
            node.best_cost = cost


Evaluator = Callable[[List[LcstNode]], object]

_SOLVER_POOLS: Dict[int, ProcessPoolExecutor] = {}
_SOLVER_POOLS_LOCK = threading.Lock()


def _solver_ready() -> int:
    return os.getpid()


def solver_pool(workers: int) -> ProcessPoolExecutor:
    """
    Process pool for lower-level solves, started once per worker count and reused by
    every later search.

    All `workers` processes are started before the pool is handed out.
    """
    with _SOLVER_POOLS_LOCK:
        pool = _SOLVER_POOLS.get(workers)
        if pool is None:
            pool = ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("spawn"))
            pids = {future.result() for future in [pool.submit(_solver_ready) for _ in range(workers)]}
            logger.debug(f"Started solver pool with {len(pids)} processes for {workers} workers")
            _SOLVER_POOLS[workers] = pool
        return pool


@atexit.register
def shutdown_solver_pools() -> None:
    with _SOLVER_POOLS_LOCK:
        for pool in _SOLVER_POOLS.values():
            pool.shutdown(wait=True, cancel_futures=True)
        _SOLVER_POOLS.clear()


def search(tree: Lcst, prediction: PredictionResult, plan: SignalPlan, budget: SearchBudget, cfg: Config,
           evaluate: Optional[Evaluator] = None) -> Tuple[Trajectory, SearchStats, Optional[P2Solution]]:
    """
    Parallel tree search from the initial solution of the prediction.

    Selection and backpropagation share one lock over the tree; lower-level solves run
    outside it. Stops when the wall-clock limit is reached or the tree is exhausted, and
    returns the initial trajectory when no path beats it.
    """
    init = prediction.initial_subject_trajectory.states[0]
    if evaluate is None:
        pool = solver_pool(budget.worker_count) if budget.worker_count > 1 and budget.process_solves else None

        def evaluate(path):
            instance = build_p2(prediction, path, init, plan, cfg)
            if pool is None:
                return solve_p2(instance, diagnose=False)
            return pool.submit(solve_p2, instance, False).result()

    stats = SearchStats(initial_cost=prediction.initial_cost, best_cost=prediction.initial_cost,
                        path_count=count_strategies(tree))
    best: Dict[str, object] = {"trajectory": prediction.initial_subject_trajectory, "solution": None}
    lock = threading.Lock()
    start = time.perf_counter()
    deadline = None if budget.wall_time_limit is None else start + budget.wall_time_limit

    def worker():
        while True:
            if deadline is not None and time.perf_counter() >= deadline:
                return
            with lock:
                try:
                    path = select_path(tree, cfg)
                except SearchExhausted:
                    return
            outcome = evaluate(path)
            with lock:
                stats.paths_evaluated += 1
                if isinstance(outcome, P2Infeasible):
                    stats.paths_infeasible += 1
                    backpropagate(path, None)
                    continue
                cost = total_cost(outcome, path)
                backpropagate(path, cost)
                if cost < stats.best_cost - 1e-9:
                    stats.best_cost = cost
                    best["trajectory"] = outcome.states
                    best["solution"] = outcome
                    stats.improvements.append((time.perf_counter() - start, cost))

    if budget.worker_count == 1:
        worker()
    else:
        with ThreadPoolExecutor(max_workers=budget.worker_count) as threads:
            futures = [threads.submit(worker) for _ in range(budget.worker_count)]
            for future in futures:
                future.result()
    stats.wall_time = time.perf_counter() - start
    return best["trajectory"], stats, best["solution"]


# ---------------------------------------------------------------------------
# Strategy filter
# ---------------------------------------------------------------------------

class StrategyFilter:
    """
    Edge filter for the planner's strategy trees.

    Same-lane edges must keep the subject's order with the vehicles that stay in its lane.
    Lane changes are limited to change slots: the first step a path may change again, and
    every `lane_change_stride` steps after t0 + 1.

    Every edge also narrows the position interval the subject can occupy at that step
    along the path. Each bound is a row of the lower-level program or follows from the
    kinematics, so an empty interval marks a path the program would reject anyway.
    """

    def __init__(self, prediction: PredictionResult, subject: int, cfg: Config, lanes: Sequence[int]):
        self.prediction = prediction
        self.subject = subject
        self.cfg = cfg
        self.lanes = tuple(lanes)
        self._orders: Dict[int, Dict[int, List[int]]] = {}
        self._reach = self._reach_window()
        init = prediction.initial_subject_trajectory.states[0]
        self._root_interval = (init.pos, init.pos)
        self._step_advance = max(cfg.speed_limit, init.speed) * cfg.dt
        vehicle = prediction.vehicles.get(subject)
        length = vehicle.length if vehicle is not None else cfg.vehicle_length
        self._finish = cfg.control_len + length + cfg.epsilon
        self._intervals: Dict[Tuple[int, Lcg], Tuple[float, float]] = {}

    def _reach_window(self) -> Dict[int, Tuple[float, float]]:
        cfg = self.cfg
        init = self.prediction.initial_subject_trajectory.states[0]
        slow = fast = init
        window = {init.step: (init.pos, init.pos)}
        for _ in range(self.prediction.horizon_steps):
            slow = kinematic_step(slow, max(-cfg.decel_max, -slow.speed / cfg.dt), cfg)
            fast_speed = min(cfg.speed_limit, fast.speed + cfg.accel_max * cfg.dt)
            fast = kinematic_step(fast, (fast_speed - fast.speed) / cfg.dt, cfg)
            window[slow.step] = (slow.pos, fast.pos)
        return window

    def _order(self, step: int) -> Dict[int, List[int]]:
        order = self._orders.get(step)
        if order is None:
            by_lane = lane_positions(self.prediction, step, self.lanes, exclude=(self.subject,))
            order = {lane: [vid for vid, _ in pairs] for lane, pairs in by_lane.items()}
            self._orders[step] = order
        return order

    @staticmethod
    def _ahead(order: List[int], leader: int) -> set:
        if leader in VIRTUAL_IDS:
            return set()
        return set(order[:order.index(leader) + 1])

    def keeps_order(self, parent: Lcg, child: Lcg) -> bool:
        before = self._order(parent.step)[child.lane]
        after = self._order(child.step)[child.lane]
        ahead_before = self._ahead(before, parent.leader)
        ahead_after = self._ahead(after, child.leader)
        for vid in set(before) & set(after):
            if (vid in ahead_before) != (vid in ahead_after):
                return False
        return True

    def on_change_slot(self, node: LcstNode, step: int) -> bool:
        t0 = self.prediction.t0
        earliest = t0 + 1
        if node.last_change is not None:
            earliest = max(earliest, node.last_change + self.cfg.lc_steps)
        return step == earliest or (step - t0 - 1) % self.cfg.lane_change_stride == 0

    def interval(self, node: LcstNode) -> Optional[Tuple[float, float]]:
        """Positions the subject can occupy at `node` along its path, or None when there are none."""
        if node.parent is None:
            return self._root_interval
        key = (id(node.parent), node.gap)
        if key not in self._intervals:
            parent = self.interval(node.parent)
            if parent is None:
                return None
            bounds = self.narrow(parent, node.gap, node.lane != node.parent.lane)
            if bounds is None:
                return None
            self._intervals[key] = bounds
        return self._intervals[key]

    def narrow(self, parent: Tuple[float, float], gap: Lcg, change: bool) -> Optional[Tuple[float, float]]:
        """Interval at `gap` one step after `parent`, or None when it is empty."""
        cfg, prediction = self.cfg, self.prediction
        step = gap.step
        slow, fast = self._reach[step]
        low = max(parent[0], slow, self._finish - (prediction.end_step - step) * cfg.speed_limit * cfg.dt)
        high = min(parent[1] + self._step_advance, fast)
        if gap.leader not in VIRTUAL_IDS:
            shifted = prediction.state_at(gap.leader, step - cfg.cf_steps)
            if shifted is not None:
                high = min(high, shifted.pos - cfg.d_cf)
        if gap.follower not in VIRTUAL_IDS:
            if gap.follower in prediction.preceding:
                if step + cfg.cf_steps <= prediction.end_step:
                    follower = prediction.state_at(gap.follower, step + cfg.cf_steps)
                    if follower is not None:
                        low = max(low, follower.pos + cfg.d_cf)
            elif change:
                follower = prediction.state_at(gap.follower, step)
                if follower is not None:
                    low = max(low, follower.pos + follower.speed ** 2 / (2 * cfg.decel_max))
        if change:
            high = min(high, cfg.control_len - cfg.nochange_len)
        if low > high + _INTERVAL_TOL:
            return None
        return low, high

    def __call__(self, node: LcstNode, gap: Lcg) -> bool:
        change = gap.lane != node.lane
        if change:
            if not self.on_change_slot(node, gap.step):
                return False
        elif not self.keeps_order(node.gap, gap):
            return False
        parent = self.interval(node)
        if parent is None:
            return False
        bounds = self.narrow(parent, gap, change)
        if bounds is None:
            return False
        self._intervals[(id(node), gap)] = bounds
        return True


def strategy_tree(prediction: PredictionResult, geometry: ApproachGeometry, cfg: Config,
                  last_change_step: Optional[int] = None) -> Lcst:
    """
    The planner's strategy tree for the prediction's subject.

    Raises:
        NoStrategyError: If no strategy reaches a dedicated lane
        TreeSizeError: If the tree outgrows `cfg.max_tree_nodes`
    """
    subject = prediction.subject
    lanes = geometry.lanes
    dedicated = geometry.dedicated_lanes(prediction.vehicles[subject].movement)
    gap_sets = {t: feasible_gaps(prediction, subject, t, cfg, lanes)
                for t in range(prediction.t0 + 1, prediction.end_step + 1)}
    start_gap = root_gap(prediction, lanes)
    return build_lcst(
        gap_sets, start_gap, prediction.horizon_steps, dedicated, cfg,
        subject=subject,
        last_change_step=last_change_step,
        edge_filter=StrategyFilter(prediction, subject, cfg, lanes),
        max_changes=lanes_to_dedicated(start_gap.lane, dedicated) + cfg.extra_lane_changes,
        initial_cost=prediction.initial_cost,
    )


# ---------------------------------------------------------------------------
# Planning pipeline
# ---------------------------------------------------------------------------

def optimality_indices(initial_cost: float, found_cost: float,
                       best_cost: float) -> Tuple[Optional[float], Optional[float]]:
    """
    Two optimality measures of a search result.

    The first is (C* - C) / (C - C0) x 100 as usually quoted; the second is the fraction
    of the initial gap that was closed, (C0 - C) / (C0 - C*). Each is None when its
    denominator vanishes.
    """
    verbatim = None
    if abs(found_cost - initial_cost) > 1e-12:
        verbatim = (best_cost - found_cost) / (found_cost - initial_cost) * 100.0
    gap_closed = None
    if abs(initial_cost - best_cost) > 1e-12:
        gap_closed = (initial_cost - found_cost) / (initial_cost - best_cost)
    return verbatim, gap_closed


def _same_state(a: VehicleState, b: VehicleState) -> bool:
    return (a.lane == b.lane and abs(a.pos - b.pos) <= _STATE_TOL
            and abs(a.speed - b.speed) <= _STATE_TOL)


def _gap_of(prediction: PredictionResult, state: VehicleState, lanes: Sequence[int]) -> Lcg:
    """Gap of the predicted traffic that a subject state falls into."""
    pairs = lane_positions(prediction, state.step, lanes, exclude=(prediction.subject,))[state.lane]
    leader = VIRTUAL_IDS[0]
    follower = VIRTUAL_IDS[1]
    for vid, pos in pairs:
        if (-pos, vid) < (-state.pos, prediction.subject):
            leader = vid
        else:
            follower = vid
            break
    return Lcg(leader=leader, follower=follower, lane=state.lane, step=state.step)


def incumbent_cost(previous: Trajectory, prediction: PredictionResult, plan: SignalPlan, cfg: Config,
                   geometry: ApproachGeometry) -> Optional[Tuple[Trajectory, float]]:
    """
    Re-validate a previous plan against a new prediction.

    Returns the plan restricted to the new horizon with its cost, or None when it no longer
    starts at the current state, leaves the dedicated lanes or violates any row.
    """
    t0, end = prediction.t0, prediction.end_step
    current = prediction.initial_subject_trajectory.states[0]
    start = previous.state_at(t0)
    if start is None or not _same_state(start, current):
        return None
    states = [state for state in previous.states if t0 <= state.step <= end]
    while states[-1].step < end:
        states[-1] = replace(states[-1], accel=0.0)
        states.append(kinematic_step(states[-1], 0.0, cfg))
    dedicated = geometry.dedicated_lanes(prediction.vehicles[prediction.subject].movement)
    if states[-1].lane not in dedicated:
        return None
    gaps = [_gap_of(prediction, state, geometry.lanes) for state in states]
    instance = build_p2(prediction, gaps, current, plan, cfg)
    profile = [state.accel for state in states[:-1]]
    if validate_profile(instance, profile):
        return None
    trajectory = replay_profile(instance, profile)
    return trajectory, trajectory_cost(trajectory, cfg)


def plan_trajectory(snapshot: SceneSnapshot, subject: int, plan: SignalPlan, budget: SearchBudget, cfg: Config,
                    *, geometry: ApproachGeometry, previous: Optional[Trajectory] = None,
                    plan_log: Optional[PlanLog] = None,
                    registry: Optional[MutableMapping[int, Trajectory]] = None) -> Trajectory:
    """
    Plan one automated vehicle from the snapshot.

    Predicts the scene, builds the strategy tree, searches it and returns the best
    trajectory over [t0, t0 + h]. A prediction overflow or an empty tree returns the
    predicted trajectory instead. The result is stored in `registry` so vehicles planned
    afterwards treat it as fixed.
    """
    t0 = snapshot.step
    started = time.perf_counter()
    scene = replace(snapshot, registry={vid: traj for vid, traj in snapshot.registry.items() if vid != subject},
                    committed={})
    record = dict(subject=subject, step=t0, h=0, path_count=0, paths_evaluated=0, paths_infeasible=0,
                  worker_count=budget.worker_count)

    def finish(trajectory: Trajectory, initial_cost: float, best_cost: float, **extra) -> Trajectory:
        if registry is not None:
            registry[subject] = trajectory
        if plan_log is not None:
            plan_log.append(PlanRecord(initial_cost=initial_cost, best_cost=best_cost,
                                       wall_time=time.perf_counter() - started, **{**record, **extra}))
        return trajectory

    try:
        prediction = predict_scene(scene, subject, plan, cfg, geometry)
    except PredictionOverflowError as e:
        logger.warning(f"Falling back for vehicle {subject} at step {t0}: {e.message}")
        cost = trajectory_cost(e.partial, cfg)
        return finish(e.partial, cost, cost, h=len(e.partial) - 1, fallback_reason="prediction_overflow")

    initial = prediction.initial_subject_trajectory
    record["h"] = prediction.horizon_steps
    if passed_stop_bar(snapshot.states[subject].pos, cfg):
        return finish(initial, prediction.initial_cost, prediction.initial_cost, fallback_reason="past_stop_bar")

    try:
        tree = strategy_tree(prediction, geometry, cfg, snapshot.last_change.get(subject))
    except (NoStrategyError, TreeSizeError) as e:
        reason = "empty_tree" if isinstance(e, NoStrategyError) else "tree_size"
        logger.warning(f"Falling back for vehicle {subject} at step {t0}: {e}")
        return finish(initial, prediction.initial_cost, prediction.initial_cost, fallback_reason=reason)

    trajectory, stats, _ = search(tree, prediction, plan, budget, cfg)
    record.update(path_count=stats.path_count, paths_evaluated=stats.paths_evaluated,
                  paths_infeasible=stats.paths_infeasible)
    best_cost = stats.best_cost
    kept = False
    if previous is not None:
        incumbent = incumbent_cost(previous, prediction, plan, cfg, geometry)
        if incumbent is not None and incumbent[1] < best_cost - 1e-9:
            trajectory, best_cost = incumbent
            kept = True
    logger.debug(f"Planned vehicle {subject} at step {t0}: h={prediction.horizon_steps}, "
                 f"{stats.paths_evaluated}/{stats.path_count} paths, C0={prediction.initial_cost:.1f}, "
                 f"C={best_cost:.1f}{' (kept previous)' if kept else ''}")
    return finish(trajectory, prediction.initial_cost, best_cost, kept_previous=kept)

"""
Feasible lane-changing gaps and the lane-changing strategy tree (LCST).

The tree is built breadth-first, one layer per step of the planning horizon. Each
root-to-leaf path is one lane-changing strategy: a gap per step, unit lane moves
separated by at least τ_lc, ending in a dedicated lane of the subject's movement.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence

from .config import Config
from .helper_functions import setup_logging
from .models import VIRTUAL_IDS, Lcg
from .prediction import PredictionResult
from .scenario import enumerate_lcgs, lanes_to_dedicated, virtual_position

logger = setup_logging(__name__)


class NoStrategyError(RuntimeError):
    """No strategy reaches a dedicated lane within the horizon."""


class TreeSizeError(RuntimeError):
    """The strategy tree grew beyond `max_tree_nodes`."""


@dataclass(eq=False)
class LcstNode:
    """One gap at one layer, with its search statistics f(g) and N(g)."""
    gap: Lcg
    layer: int
    best_cost: float = float("inf")
    visits: int = 1
    children: List["LcstNode"] = field(default_factory=list, repr=False)
    pruned: bool = False
    parent: Optional["LcstNode"] = field(default=None, repr=False)
    last_change: Optional[int] = None
    change_count: int = 0

    @property
    def lane(self) -> int:
        return self.gap.lane

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def path(self) -> List["LcstNode"]:
        """Nodes from the root down to this node."""
        nodes = []
        node = self
        while node is not None:
            nodes.append(node)
            node = node.parent
        return nodes[::-1]


@dataclass
class Lcst:
    root: LcstNode
    horizon: int
    subject: int
    dedicated: frozenset = frozenset()
    node_count: int = 1

    @property
    def exhausted(self) -> bool:
        return self.root.pruned


EdgeFilter = Callable[[LcstNode, Lcg], bool]


def _gap_spacing(gap: Lcg, positions: Mapping[int, float], cfg: Config) -> float:
    def pos(vid):
        return virtual_position(vid, cfg) if vid in VIRTUAL_IDS else positions[vid]
    return pos(gap.leader) - pos(gap.follower)


def lane_positions(prediction: PredictionResult, step: int, lanes: Iterable[int],
                   exclude: Iterable[int] = ()) -> Dict[int, List[tuple]]:
    """Per lane, (id, position) pairs of the predicted vehicles at `step`, front-to-back."""
    exclude = set(exclude)
    by_lane: Dict[int, List[tuple]] = {lane: [] for lane in lanes}
    for vid, trajectory in prediction.trajectories.items():
        if vid in exclude:
            continue
        state = trajectory.state_at(step)
        if state is not None and state.lane in by_lane:
            by_lane[state.lane].append((vid, state.pos))
    for lane in by_lane:
        by_lane[lane].sort(key=lambda pair: (-pair[1], pair[0]))
    return by_lane


def root_gap(prediction: PredictionResult, lanes: Iterable[int]) -> Lcg:
    """The gap the subject occupies at t0."""
    t0 = prediction.t0
    subject_state = prediction.initial_subject_trajectory.states[0]
    occupants = lane_positions(prediction, t0, lanes)[subject_state.lane]
    ordered = sorted(occupants + [(prediction.subject, subject_state.pos)],
                     key=lambda pair: (-pair[1], pair[0]))
    ids = [vid for vid, _ in ordered]
    index = ids.index(prediction.subject)
    gaps = enumerate_lcgs([pair for pair in ordered if pair[0] != prediction.subject],
                          subject_state.lane, t0)
    return gaps[index]


def feasible_gaps(prediction: PredictionResult, subject: int, t: int, cfg: Config,
                  lanes: Iterable[int]) -> List[Lcg]:
    """
    G^ω(t): gaps of every lane whose predicted spacing is at least d_p + d_f.

    The subject's own gap at t0 is always included. The list is ordered by lane, then
    leader id, then follower id.
    """
    lanes = tuple(lanes)
    by_lane = lane_positions(prediction, t, lanes, exclude=(subject,))
    positions = {vid: pos for pairs in by_lane.values() for vid, pos in pairs}
    gaps = []
    for lane in lanes:
        for gap in enumerate_lcgs(by_lane[lane], lane, t):
            if _gap_spacing(gap, positions, cfg) >= cfg.d_p + cfg.d_f:
                gaps.append(gap)
    if t == prediction.t0:
        initial = root_gap(prediction, lanes)
        if initial not in gaps:
            gaps.append(initial)
    return sorted(gaps, key=lambda gap: gap.key)


def _reachable(lane: int, step: int, last_change: Optional[int], changes: int, end: int,
               dedicated: frozenset, cfg: Config, max_changes: Optional[int]) -> bool:
    """Whether a node can still end in a dedicated lane by `end`."""
    needed = lanes_to_dedicated(lane, dedicated)
    if needed == 0:
        return True
    if max_changes is not None and changes + needed > max_changes:
        return False
    earliest = step + 1
    if last_change is not None:
        earliest = max(earliest, last_change + cfg.lc_steps)
    return earliest + (needed - 1) * cfg.lc_steps <= end


def build_lcst(gap_sets: Mapping[int, Sequence[Lcg]], root_gap: Lcg, h: int, dedicated: Iterable[int],
               cfg: Config, *, subject: int = 0, last_change_step: Optional[int] = None,
               edge_filter: Optional[EdgeFilter] = None, max_changes: Optional[int] = None,
               initial_cost: float = float("inf")) -> Lcst:
    """
    Build the strategy tree over steps root_gap.step .. root_gap.step + h.

    `gap_sets[t]` is G^ω(t). An edge joins gaps at consecutive layers when the lanes differ
    by at most one and a change keeps τ_lc from the previous change on the same path.
    `last_change_step` carries a change made before t0 into that check. Nodes that can no
    longer reach a dedicated lane are dropped while building; leaves outside the dedicated
    lanes and branches left without leaves are removed afterwards.

    Raises:
        NoStrategyError: If no path survives
        TreeSizeError: If more than `cfg.max_tree_nodes` nodes are created
    """
    dedicated = frozenset(dedicated)
    t0 = root_gap.step
    end = t0 + h
    root = LcstNode(gap=root_gap, layer=t0, best_cost=initial_cost, last_change=last_change_step)
    tree = Lcst(root=root, horizon=h, subject=subject, dedicated=dedicated)
    if not _reachable(root.lane, t0, last_change_step, 0, end, dedicated, cfg, max_changes):
        raise NoStrategyError(f"Lane {root.lane} cannot reach {sorted(dedicated)} within {h} steps")

    layers: List[List[LcstNode]] = [[root]]
    for t in range(t0, end):
        candidates = gap_sets.get(t + 1, ())
        next_layer: List[LcstNode] = []
        for node in layers[-1]:
            for gap in candidates:
                change = gap.lane != node.lane
                if abs(gap.lane - node.lane) > 1:
                    continue
                if change and node.last_change is not None and t + 1 - node.last_change < cfg.lc_steps:
                    continue
                changes = node.change_count + (1 if change else 0)
                if max_changes is not None and changes > max_changes:
                    continue
                last = t + 1 if change else node.last_change
                if not _reachable(gap.lane, t + 1, last, changes, end, dedicated, cfg, max_changes):
                    continue
                if edge_filter is not None and not edge_filter(node, gap):
                    continue
                child = LcstNode(gap=gap, layer=t + 1, best_cost=initial_cost, parent=node,
                                 last_change=last, change_count=changes)
                node.children.append(child)
                next_layer.append(child)
                tree.node_count += 1
                if tree.node_count > cfg.max_tree_nodes:
                    raise TreeSizeError(f"Strategy tree exceeded {cfg.max_tree_nodes} nodes at layer {t + 1}")
        if not next_layer:
            raise NoStrategyError(f"No feasible gap continues the tree at step {t + 1}")
        layers.append(next_layer)

    # Drop leaves outside the dedicated lanes, then branches without leaves.
    alive = set()
    for node in layers[-1]:
        if node.lane in dedicated:
            alive.add(id(node))
    for layer in reversed(layers[:-1]):
        for node in layer:
            node.children = [child for child in node.children if id(child) in alive]
            if node.children:
                alive.add(id(node))
    if id(root) not in alive:
        raise NoStrategyError(f"No strategy ends in lanes {sorted(dedicated)}")
    tree.node_count = len(alive)
    logger.debug(f"Built strategy tree for vehicle {subject}: h={h}, {tree.node_count} nodes, "
                 f"{count_strategies(tree)} strategies")
    return tree


def iter_paths(tree: Lcst) -> Iterator[List[LcstNode]]:
    """Unpruned root-to-leaf paths in child order."""
    if tree is None or tree.root.pruned:
        return
    stack = [(tree.root, [tree.root])]
    while stack:
        node, path = stack.pop()
        live = [child for child in node.children if not child.pruned]
        if not node.children:
            yield path
            continue
        for child in reversed(live):
            stack.append((child, path + [child]))


def count_strategies(tree: Optional[Lcst]) -> int:
    """Number of unpruned root-to-leaf paths."""
    if tree is None or tree.root.pruned:
        return 0
    counts: Dict[int, int] = {}
    order = []
    stack = [tree.root]
    while stack:
        node = stack.pop()
        order.append(node)
        stack.extend(child for child in node.children if not child.pruned)
    for node in reversed(order):
        live = [child for child in node.children if not child.pruned]
        counts[id(node)] = 1 if not node.children else sum(counts[id(child)] for child in live)
    return counts[id(tree.root)]


def dump_lcst(tree: Lcst) -> str:
    """Layered plain-text edge list: `layer <t>: <parent> -> <child>`."""
    lines = []
    layer = [tree.root]
    while layer:
        next_layer = []
        for node in layer:
            for child in node.children:
                if child.pruned:
                    continue
                lines.append(f"layer {child.layer}: {node.gap.label()} -> {child.gap.label()}")
                next_layer.append(child)
        layer = next_layer
    return "\n".join(lines)


def change_flags(path: Sequence[LcstNode]) -> List[int]:
    """ϑ per layer: 1 where the lane differs from the previous layer."""
    flags = [0]
    for prev, cur in zip(path, path[1:]):
        flags.append(1 if cur.lane != prev.lane else 0)
    return flags

"""Global subgoal selection by simulated-observation scoring, local
4-connected navigation, and the random-frontier baseline."""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .grid import CellIndex, GridSpec, Pose2D, ScoredGrid, cell_to_world, world_to_cell
from .world import AXIS_HEADINGS, FovModel, World, action_towards, axis_tables, cast, observe

UNKNOWN = 0
FREE = 1
OCCUPIED = 2

EXCLUSION_RADIUS = 1.0
WAYPOINT_SPACING = 0.5

# neighbour expansion order: +x, -x, +y, -y
_NEIGHBOURS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class ExplorationComplete(Exception):
    """No candidate subgoal is left."""


class ObstacleMap:
    """Ternary map (unknown / free / occupied) built from observations."""

    def __init__(self, spec: GridSpec, state: Optional[np.ndarray] = None):
        self.spec = spec
        if state is None:
            state = np.zeros(spec.n_cells, dtype=np.uint8)
        self.state = np.asarray(state, dtype=np.uint8).ravel().copy()
        if self.state.size != spec.n_cells:
            raise ValueError("state size does not match spec")

    def __getitem__(self, cell) -> int:
        return int(self.state[cell[1] * self.spec.width + cell[0]])

    def flat(self, cell) -> int:
        return int(cell[1]) * self.spec.width + int(cell[0])

    def cell_of(self, i) -> CellIndex:
        return CellIndex(int(i) % self.spec.width, int(i) // self.spec.width)

    def mark_free(self, ids) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        self.state[ids[self.state[ids] == UNKNOWN]] = FREE

    def mark_occupied(self, ids) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        self.state[ids] = OCCUPIED

    @property
    def occupied(self) -> np.ndarray:
        return (self.state == OCCUPIED).astype(np.uint8)

    def known_cells(self) -> frozenset:
        return frozenset(self.cell_of(i) for i in np.flatnonzero(self.state != UNKNOWN))

    def copy(self) -> "ObstacleMap":
        return ObstacleMap(self.spec, self.state)

    def __eq__(self, other):
        if not isinstance(other, ObstacleMap):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.state, other.state)


def update_obstacle_map(m: ObstacleMap, world: World, pose: Pose2D, fov: FovModel = FovModel()) -> ObstacleMap:
    """Mark the cells seen from ``pose`` free and every ray-stopping obstacle
    cell occupied.  Updates ``m`` in place and returns it."""
    vis, hits = observe(world, pose, fov)
    m.mark_free(vis)
    m.mark_occupied(hits)
    return m


def frontier_cells(m: ObstacleMap) -> frozenset:
    """Known-free cells with at least one unknown 4-neighbour."""
    mask = _kernels.frontier_mask(m.state, m.spec.width, m.spec.height)
    return frozenset(m.cell_of(i) for i in np.flatnonzero(mask))


def _passable(m: ObstacleMap, unknown_traversable: bool) -> np.ndarray:
    if unknown_traversable:
        return (m.state != OCCUPIED).astype(np.uint8)
    return (m.state == FREE).astype(np.uint8)


def dijkstra_path(m: ObstacleMap, start, goal, unknown_traversable: bool = True) -> Optional[List[CellIndex]]:
    """Unit-cost 4-connected shortest path, or None.

    Equal-distance pops are ordered by ``(ix, iy)`` and neighbours expand in
    the order +x, -x, +y, -y, so the returned path is unique.
    """
    spec = m.spec
    start = CellIndex(*start)
    goal = CellIndex(*goal)
    if not (spec.in_bounds(start) and spec.in_bounds(goal)):
        return None
    passable = _passable(m, unknown_traversable)
    W = spec.width
    if not passable[goal.iy * W + goal.ix]:
        return None
    dist = {start: 0}
    parent: Dict[CellIndex, CellIndex] = {}
    heap = [(0, start.ix, start.iy)]
    done = set()
    while heap:
        d, x, y = heapq.heappop(heap)
        u = CellIndex(x, y)
        if u in done:
            continue
        done.add(u)
        if u == goal:
            path = [u]
            while path[-1] != start:
                path.append(parent[path[-1]])
            path.reverse()
            return path
        for dx, dy in _NEIGHBOURS:
            v = CellIndex(x + dx, y + dy)
            if not (0 <= v.ix < W and 0 <= v.iy < spec.height) or not passable[v.iy * W + v.ix]:
                continue
            nd = d + 1
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, v.ix, v.iy))
    return None


class PathTree:
    """Single-source shortest-path tree over the obstacle map, with the same
    tie-breaking as :func:`dijkstra_path`."""

    def __init__(self, m: ObstacleMap, start, unknown_traversable: bool = True):
        self.spec = m.spec
        self.start = CellIndex(*start)
        passable = _passable(m, unknown_traversable)
        src = self.start.iy * m.spec.width + self.start.ix
        passable[src] = 1
        self.dist, self.parent = _kernels.bfs_tree(
            passable, m.spec.width, m.spec.height, np.array([src], dtype=np.int64)
        )

    def reachable(self, cell) -> bool:
        return self.dist[cell[1] * self.spec.width + cell[0]] >= 0

    def path_to(self, cell) -> Optional[List[CellIndex]]:
        W = self.spec.width
        i = cell[1] * W + cell[0]
        if self.dist[i] < 0:
            return None
        out = [i]
        while self.dist[out[-1]] > 0:
            out.append(int(self.parent[out[-1]]))
        out.reverse()
        return [CellIndex(j % W, j // W) for j in out]


def waypoint_indices(n_moves: int, spacing_cells: int) -> List[int]:
    """Path indices used as waypoints: every ``spacing_cells`` moves plus the end."""
    if n_moves <= 0:
        return []
    idx = list(range(spacing_cells, n_moves + 1, spacing_cells))
    if not idx or idx[-1] != n_moves:
        idx.append(n_moves)
    return idx


def spacing_in_cells(spacing: float, spec: GridSpec) -> int:
    return max(1, int(round(spacing / spec.resolution)))


@dataclass
class VisitedMask:
    """Visited positions; cells within ``radius`` of any are presumed empty
    of the target."""

    spec: GridSpec
    radius: float = EXCLUSION_RADIUS
    points: List[Tuple[float, float]] = field(default_factory=list)
    mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.zeros(self.spec.n_cells, dtype=bool)
        r = int(math.ceil(self.radius / self.spec.resolution)) + 1
        oy, ox = np.mgrid[-r : r + 1, -r : r + 1]
        self._stamp = (ox.ravel().astype(np.int64), oy.ravel().astype(np.int64))

    def add(self, point) -> None:
        point = (float(point[0]), float(point[1]))
        if self.points and self.points[-1] == point:
            return
        self.points.append(point)
        spec = self.spec
        c = world_to_cell(point, spec)
        ox, oy = self._stamp
        _kernels.stamp_disk(self.mask, spec.width, spec.height, c.ix, c.iy, point[0], point[1], ox, oy,
                            spec.resolution, float(spec.origin[0]), float(spec.origin[1]), float(self.radius))

    def excludes(self, cell) -> bool:
        return bool(self.mask[cell[1] * self.spec.width + cell[0]])


def effective_scores(object_map: ScoredGrid, visited: Optional[VisitedMask] = None):
    """Dense primary/secondary arrays with visited-excluded cells zeroed."""
    P, S = object_map.to_dense()
    P = P.ravel()
    S = S.ravel()
    if visited is not None:
        P = np.where(visited.mask, 0.0, P)
        S = np.where(visited.mask, 0.0, S)
    return P, S


def path_view_union(obstacle_map: ObstacleMap, path: Sequence, fov: FovModel, spacing_cells: int) -> set:
    """Flat ids visible (over known obstacles) from the waypoints of ``path``."""
    spec = obstacle_map.spec
    occ = obstacle_map.occupied
    union = set()
    for k in waypoint_indices(len(path) - 1, spacing_cells):
        a, b = path[k - 1], path[k]
        h = {(1, 0): 0, (0, 1): 1, (-1, 0): 2, (0, -1): 3}[(b[0] - a[0], b[1] - a[1])]
        x, y = cell_to_world(b, spec)
        vis, _ = cast(occ, spec, Pose2D(x, y, AXIS_HEADINGS[h]), fov.view_radius, fov.view_angle)
        union.update(vis.tolist())
    return union


def evaluate_subgoal(
    cand,
    pose: Pose2D,
    object_map: ScoredGrid,
    obstacle_map: ObstacleMap,
    fov: FovModel = FovModel(),
    waypoint_spacing: float = WAYPOINT_SPACING,
    visited: Optional[VisitedMask] = None,
) -> Optional[Tuple[float, float]]:
    """Value of one candidate subgoal, or None if it is unreachable.

    Simulates the views at regularly spaced waypoints along the shortest path
    (unknown cells are treated as traversable and transparent) and max-pools
    both score channels over the union of the simulated views.
    """
    spec = obstacle_map.spec
    start = world_to_cell(pose.position, spec)
    path = dijkstra_path(obstacle_map, start, cand, unknown_traversable=True)
    if path is None:
        return None
    union = path_view_union(obstacle_map, path, fov, spacing_in_cells(waypoint_spacing, spec))
    if not union:
        return (0.0, 0.0)
    P, S = effective_scores(object_map, visited)
    ids = np.fromiter(union, dtype=np.int64)
    return (float(P[ids].max()), float(S[ids].max()))


def score_candidates(
    tree: PathTree,
    cands: np.ndarray,
    P: np.ndarray,
    S: np.ndarray,
    obstacle_map: ObstacleMap,
    fov: FovModel = FovModel(),
    waypoint_spacing: float = WAYPOINT_SPACING,
):
    """Batch form of :func:`evaluate_subgoal` for candidates (flat ids) that
    share one path tree.  ``P, S`` come from :func:`effective_scores`."""
    spec = obstacle_map.spec
    offx, offy, lens, insec = axis_tables(spec, fov.view_radius, fov.view_angle)
    return _kernels.score_candidates(
        tree.dist, tree.parent, spec.width, spec.height, np.asarray(cands, dtype=np.int64),
        spacing_in_cells(waypoint_spacing, spec), obstacle_map.occupied, P, S, offx, offy, lens, insec,
    )


@dataclass(frozen=True)
class Subgoal:
    cell: CellIndex
    primary_value: float = 0.0
    secondary_value: float = 0.0
    path: Tuple[CellIndex, ...] = field(default=(), compare=False, repr=False)
    # per path cell: was it unknown when the path was planned
    unexplored: Tuple[bool, ...] = field(default=(), compare=False, repr=False)


def plan_subgoal(m: ObstacleMap, tree: "PathTree", cell, primary_value=0.0, secondary_value=0.0) -> Subgoal:
    """Subgoal for ``cell`` carrying its tree path and the path cells that
    are still unexplored."""
    path = tuple(tree.path_to(cell))
    unexplored = tuple(m[c] == UNKNOWN for c in path)
    return Subgoal(CellIndex(*cell), float(primary_value), float(secondary_value), path, unexplored)


def select_subgoal(values) -> Subgoal:
    """Highest primary value; ties fall to the secondary value, then to the
    lowest ``(ix, iy)``.  ``values`` maps cell -> (primary, secondary)."""
    items = values.items() if hasattr(values, "items") else values
    best = None
    for cell, (p, s) in items:
        key = (-p, -s, cell[0], cell[1])
        if best is None or key < best[0]:
            best = (key, cell, p, s)
    if best is None:
        raise ExplorationComplete("no candidate subgoals")
    return Subgoal(CellIndex(*best[1]), float(best[2]), float(best[3]))


def select_best(cands: np.ndarray, primary: np.ndarray, secondary: np.ndarray, width: int) -> int:
    """Array form of :func:`select_subgoal`; returns the winning position."""
    if len(cands) == 0:
        raise ExplorationComplete("no candidate subgoals")
    cands = np.asarray(cands)
    order = np.lexsort((cands // width, cands % width, -np.asarray(secondary), -np.asarray(primary)))
    return int(order[0])


def candidate_cells(m: ObstacleMap, tree: Optional[PathTree] = None,
                    exclude: Optional[np.ndarray] = None) -> np.ndarray:
    """Flat ids of subgoal candidates: frontier cells, restricted to those
    reachable from (and other than) the tree root and not flagged in
    ``exclude`` when those are given."""
    mask = _kernels.frontier_mask(m.state, m.spec.width, m.spec.height)
    if tree is not None:
        mask &= tree.dist > 0
    if exclude is not None:
        mask &= ~exclude
    return np.flatnonzero(mask)


def frontier_baseline_select(m: ObstacleMap, rng: np.random.Generator, tree: Optional[PathTree] = None,
                             exclude: Optional[np.ndarray] = None) -> Subgoal:
    """Uniformly random candidate cell, see :func:`candidate_cells`."""
    ids = candidate_cells(m, tree, exclude)
    if ids.size == 0:
        raise ExplorationComplete("frontier is empty")
    cell = m.cell_of(int(ids[rng.integers(ids.size)]))
    if tree is None:
        return Subgoal(cell)
    return plan_subgoal(m, tree, cell)


class Terminal(enum.Enum):
    REACHED = "reached"
    BLOCKED = "blocked"
    FRONTIER = "frontier"


def is_frontier(m: ObstacleMap, cell) -> bool:
    spec = m.spec
    if m[cell] != FREE:
        return False
    for dx, dy in _NEIGHBOURS:
        x, y = cell[0] + dx, cell[1] + dy
        if 0 <= x < spec.width and 0 <= y < spec.height and m[(x, y)] == UNKNOWN:
            return True
    return False


def local_plan_step(m: ObstacleMap, pose: Pose2D, subgoal: Subgoal):
    """Next action along ``subgoal.path`` or a :class:`Terminal` reason.

    Terminates when the subgoal cell is reached, when the next path cell is
    known occupied, or when the agent has pushed into space that was
    unexplored at planning time and stands on a frontier cell there.
    """
    spec = m.spec
    here = world_to_cell(pose.position, spec)
    if here == subgoal.cell:
        return Terminal.REACHED
    path = subgoal.path
    try:
        i = path.index(here)
    except ValueError:
        return Terminal.BLOCKED
    if i + 1 >= len(path):
        return Terminal.REACHED
    if i > 0 and i < len(subgoal.unexplored) and subgoal.unexplored[i] and is_frontier(m, here):
        return Terminal.FRONTIER
    nxt = path[i + 1]
    if m[nxt] == OCCUPIED:
        return Terminal.BLOCKED
    return action_towards(pose.theta, here, nxt)


__all__ = [
    "ExplorationComplete",
    "FREE",
    "OCCUPIED",
    "ObstacleMap",
    "candidate_cells",
    "PathTree",
    "Subgoal",
    "Terminal",
    "UNKNOWN",
    "VisitedMask",
    "dijkstra_path",
    "effective_scores",
    "evaluate_subgoal",
    "frontier_baseline_select",
    "frontier_cells",
    "is_frontier",
    "plan_subgoal",
    "local_plan_step",
    "score_candidates",
    "select_best",
    "select_subgoal",
    "update_obstacle_map",
    "waypoint_indices",
]

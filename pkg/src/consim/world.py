"""Ground-truth grid worlds: layout generation, the arc field of view, the
ideal target detector, agent kinematics and teacher trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from . import _kernels
from .grid import (
    PLACE_CELL_SIZE,
    CellIndex,
    GridSpec,
    MAP_RESOLUTION,
    Pose2D,
    cell_to_world,
    normalize_angle,
    world_to_cell,
)

SCENARIOS = ("constrained_start", "constrained_start_goal")
ACTIONS = ("forward", "backward", "left", "right")

# headings of the four axis directions, indexed like _kernels.AXIS_DX/DY
AXIS_HEADINGS = (0.0, math.pi / 2, -math.pi, -math.pi / 2)

STUDENT_START_DISTANCE = 3.2


class WorldGenerationError(ValueError):
    pass


class CollisionError(Exception):
    """Raised by step_agent when the destination cell is blocked."""

    def __init__(self, cell):
        super().__init__(f"collision at cell {tuple(cell)}")
        self.cell = cell


class UnreachableError(ValueError):
    pass


class NoStartPoseError(ValueError):
    pass


@dataclass(frozen=True)
class FovModel:
    view_radius: float = 3.2
    view_angle: float = math.radians(40.0)
    detection_radius: float = 1.6

    def __post_init__(self):
        if not (0.0 < self.detection_radius <= self.view_radius):
            raise ValueError("need 0 < detection_radius <= view_radius")
        if not (0.0 < self.view_angle < 2.0 * math.pi):
            raise ValueError("view_angle must lie in (0, 2*pi)")


@dataclass(frozen=True)
class WorldParams:
    width: int = 80
    height: int = 80
    n_rooms: int = 5
    min_room: int = 18
    door_width: int = 9
    corridor_prob: float = 0.25
    corridor_width: int = 10
    n_clutter: int = 4
    n_targets: int = 100
    max_retries: int = 20

    def validate(self):
        if self.width < 3 or self.height < 3:
            raise ValueError("world must be at least 3x3 cells")
        if self.n_rooms < 1:
            raise ValueError("n_rooms must be >= 1")
        if self.min_room < 2 or self.door_width < 1 or self.corridor_width < 2:
            raise ValueError("room, door and corridor sizes must be positive")
        if self.n_targets < 0 or self.n_clutter < 0 or self.max_retries < 1:
            raise ValueError("counts must be non-negative")


class World:
    """Immutable ground truth.  ``grid[iy, ix]`` is True for obstacle cells."""

    def __init__(self, spec: GridSpec, grid: np.ndarray, targets: Dict[int, Tuple[float, float]], seed: int = 0):
        grid = np.asarray(grid, dtype=bool)
        if grid.shape != (spec.height, spec.width):
            raise ValueError("grid shape does not match spec")
        grid = grid.copy()
        grid.flags.writeable = False
        self.spec = spec
        self.grid = grid
        self.targets = {int(k): (float(v[0]), float(v[1])) for k, v in targets.items()}
        for tid, pos in self.targets.items():
            c = world_to_cell(pos, spec)
            if not spec.in_bounds(c) or grid[c.iy, c.ix]:
                raise ValueError(f"target {tid} is not in a free cell")
        self.seed = seed
        self.occ = grid.ravel().astype(np.uint8)
        self.free_flat = (~grid).ravel().astype(np.uint8)
        self._cache: dict = {}

    @property
    def obstacles(self) -> frozenset:
        iy, ix = np.nonzero(self.grid)
        return frozenset(CellIndex(int(x), int(y)) for x, y in zip(ix, iy))

    @property
    def free_cells(self) -> frozenset:
        iy, ix = np.nonzero(~self.grid)
        return frozenset(CellIndex(int(x), int(y)) for x, y in zip(ix, iy))

    def is_free(self, cell) -> bool:
        return self.spec.in_bounds(cell) and not self.grid[cell[1], cell[0]]

    def flat(self, cell) -> int:
        return int(cell[1]) * self.spec.width + int(cell[0])

    def cell_of(self, flat_id) -> CellIndex:
        return CellIndex(int(flat_id) % self.spec.width, int(flat_id) // self.spec.width)

    def __eq__(self, other):
        if not isinstance(other, World):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.grid, other.grid)
            and self.targets == other.targets
        )

    def __hash__(self):
        return id(self)

    def __repr__(self):
        return f"World({self.spec.width}x{self.spec.height}, {len(self.targets)} targets)"


# ---------------------------------------------------------------- ray tables

@lru_cache(maxsize=4096)
def ray_table(heading: float, fx: float, fy: float, radius: float, angle: float, res: float):
    """Cell offsets visited by a fan of rays, relative to the pose's cell.

    ``fx, fy`` locate the pose inside its cell in cell units.  The angular
    step is half of ``res / radius`` so every cell whose center lies in the
    sector is crossed by some ray.  Returns ``(offx, offy, lens, insec)``;
    ``insec`` flags entries whose cell center is inside the sector.
    """
    step_max = 0.5 * res / radius
    n_rays = max(1, int(math.ceil(angle / step_max))) + 1
    angles = heading - angle / 2 + angle * np.arange(n_rays) / (n_rays - 1)
    ts = np.arange(0.0, radius / res, 0.125)
    ts = np.append(ts, radius / res)
    rays_x, rays_y, rays_in = [], [], []
    half = angle / 2 + 1e-9
    r_lim = radius / res + 1e-9
    for a in angles:
        px = np.floor(fx + ts * math.cos(a)).astype(np.int64)
        py = np.floor(fy + ts * math.sin(a)).astype(np.int64)
        keep = np.r_[True, (px[1:] != px[:-1]) | (py[1:] != py[:-1])]
        px, py = px[keep], py[keep]
        dx = px + 0.5 - fx
        dy = py + 0.5 - fy
        dist = np.hypot(dx, dy)
        dang = np.abs(np.mod(np.arctan2(dy, dx) - heading + math.pi, 2 * math.pi) - math.pi)
        ins = (dist <= r_lim) & (dang <= half)
        ins |= (px == 0) & (py == 0)
        rays_x.append(px)
        rays_y.append(py)
        rays_in.append(ins)
    L = max(len(r) for r in rays_x)
    offx = np.zeros((n_rays, L), np.int64)
    offy = np.zeros((n_rays, L), np.int64)
    insec = np.zeros((n_rays, L), np.bool_)
    lens = np.zeros(n_rays, np.int64)
    for j, (px, py, ins) in enumerate(zip(rays_x, rays_y, rays_in)):
        lens[j] = len(px)
        offx[j, : len(px)] = px
        offy[j, : len(px)] = py
        insec[j, : len(px)] = ins
    for a in (offx, offy, insec, lens):
        a.flags.writeable = False
    return offx, offy, lens, insec


def _table_for(pose: Pose2D, spec: GridSpec, radius: float, angle: float):
    cell = world_to_cell(pose.position, spec)
    fx = (pose.x - spec.origin[0]) / spec.resolution - cell.ix
    fy = (pose.y - spec.origin[1]) / spec.resolution - cell.iy
    key = (round(pose.theta, 12), round(fx, 9), round(fy, 9), radius, angle, spec.resolution)
    return cell, ray_table(*key)


def axis_tables(spec: GridSpec, radius: float, angle: float):
    """Stacked tables for the four axis headings from a cell center."""
    tabs = [ray_table(h, 0.5, 0.5, radius, angle, spec.resolution) for h in AXIS_HEADINGS]
    L = max(t[0].shape[1] for t in tabs)
    R = max(t[0].shape[0] for t in tabs)
    offx = np.zeros((4, R, L), np.int64)
    offy = np.zeros((4, R, L), np.int64)
    insec = np.zeros((4, R, L), np.bool_)
    lens = np.zeros((4, R), np.int64)
    for h, (ox, oy, ln, ins) in enumerate(tabs):
        offx[h, : ox.shape[0], : ox.shape[1]] = ox
        offy[h, : oy.shape[0], : oy.shape[1]] = oy
        insec[h, : ins.shape[0], : ins.shape[1]] = ins
        lens[h, : ln.shape[0]] = ln
    return offx, offy, lens, insec


def cast(occ: np.ndarray, spec: GridSpec, pose: Pose2D, radius: float, angle: float):
    """Flat ids of ``(visible, hits)`` for a pose over an occluder array."""
    cell, (offx, offy, lens, insec) = _table_for(pose, spec, radius, angle)
    return _kernels.raycast(occ, spec.width, spec.height, cell.ix, cell.iy, offx, offy, lens, insec)


def observe(world: World, pose: Pose2D, fov: FovModel):
    """Cached ground-truth raycast: ``(visible ids, hit ids)`` as int32 arrays."""
    key = ("obs", pose.x, pose.y, pose.theta, fov.view_radius, fov.view_angle)
    hit = world._cache.get(key)
    if hit is None:
        vis, hits = cast(world.occ, world.spec, pose, fov.view_radius, fov.view_angle)
        hit = (vis.astype(np.int32), hits.astype(np.int32))
        hit[0].flags.writeable = False
        hit[1].flags.writeable = False
        world._cache[key] = hit
    return hit


def visible_cells(world: World, pose: Pose2D, fov: FovModel = FovModel()) -> frozenset:
    vis, _ = observe(world, pose, fov)
    return frozenset(world.cell_of(i) for i in vis)


def _in_arc(pose: Pose2D, point, radius: float, angle: float) -> bool:
    dx = point[0] - pose.x
    dy = point[1] - pose.y
    d = math.hypot(dx, dy)
    if d > radius + 1e-9:
        return False
    if d < 1e-9:
        return True
    return abs(normalize_angle(math.atan2(dy, dx) - pose.theta)) <= angle / 2 + 1e-9


def detect_target(world: World, pose: Pose2D, target_id, fov: FovModel = FovModel()) -> bool:
    """Ideal detector: target within detection range, inside the arc, unoccluded."""
    if target_id not in world.targets:
        raise KeyError(f"unknown target id {target_id!r}")
    pos = world.targets[target_id]
    if not _in_arc(pose, pos, fov.detection_radius, fov.view_angle):
        return False
    tcell = world.flat(world_to_cell(pos, world.spec))
    vis, _ = cast(world.occ, world.spec, pose, fov.detection_radius, fov.view_angle)
    pos_i = np.searchsorted(vis, tcell)
    return bool(pos_i < vis.size and vis[pos_i] == tcell)


# ------------------------------------------------------------------ kinematics

@dataclass(frozen=True)
class AgentState:
    pose: Pose2D
    distance_traveled: float = 0.0
    visited: Tuple[Tuple[float, float], ...] = ()
    moves: int = 0


def axis_code(theta: float) -> int:
    """Index of the axis direction nearest ``theta``."""
    return int(round(theta / (math.pi / 2))) % 4


_TURN = {"forward": 0, "left": 1, "backward": 2, "right": 3}


def step_agent(world: World, state: AgentState, action: str) -> AgentState:
    """Move one cell.  Directions are relative to the heading snapped to the
    nearest axis; backward keeps the heading, the others face the motion.

    Raises CollisionError if the destination is an obstacle or off the grid.
    """
    if action not in _TURN:
        raise ValueError(f"unknown action {action!r}")
    spec = world.spec
    cell = world_to_cell(state.pose.position, spec)
    h = (axis_code(state.pose.theta) + _TURN[action]) % 4
    nxt = CellIndex(cell.ix + int(_kernels.AXIS_DX[h]), cell.iy + int(_kernels.AXIS_DY[h]))
    if not world.is_free(nxt):
        raise CollisionError(nxt)
    theta = state.pose.theta if action == "backward" else AXIS_HEADINGS[h]
    x, y = cell_to_world(nxt, spec)
    moves = state.moves + 1
    return AgentState(
        pose=Pose2D(x, y, theta),
        distance_traveled=moves * spec.resolution,
        visited=state.visited + ((x, y),),
        moves=moves,
    )


def action_towards(theta: float, src, dst) -> str:
    """Action that moves from cell ``src`` to the 4-adjacent cell ``dst``."""
    d = (dst[0] - src[0], dst[1] - src[1])
    h = {(1, 0): 0, (0, 1): 1, (-1, 0): 2, (0, -1): 3}[d]
    rel = (h - axis_code(theta)) % 4
    return ("forward", "left", "backward", "right")[rel]


# ------------------------------------------------------------------ generation

def _connected(free: np.ndarray) -> bool:
    flat = free.ravel().astype(np.uint8)
    ids = np.flatnonzero(flat)
    if ids.size == 0:
        return False
    H, W = free.shape
    dist, _ = _kernels.bfs_tree(flat, W, H, ids[:1].astype(np.int64))
    return bool(np.all(dist[ids] >= 0))


def _split_rooms(grid: np.ndarray, p: WorldParams, rng: np.random.Generator) -> int:
    H, W = grid.shape
    # rects are inclusive (x0, y0, x1, y1) interiors; flag marks corridors
    rects = [((1, 1, W - 2, H - 2), False)]
    while len(rects) < p.n_rooms:
        splittable = []
        for i, ((x0, y0, x1, y1), corridor) in enumerate(rects):
            w, h = x1 - x0 + 1, y1 - y0 + 1
            if corridor:
                continue
            if w >= 2 * p.min_room + 1 or h >= 2 * p.min_room + 1:
                splittable.append(i)
        if not splittable:
            break
        areas = np.array([
            (rects[i][0][2] - rects[i][0][0] + 1) * (rects[i][0][3] - rects[i][0][1] + 1) for i in splittable
        ], dtype=float)
        i = splittable[int(rng.choice(len(splittable), p=areas / areas.sum()))]
        (x0, y0, x1, y1), _ = rects.pop(i)
        w, h = x1 - x0 + 1, y1 - y0 + 1
        vertical = w > h if w != h else bool(rng.integers(2))
        if vertical and w < 2 * p.min_room + 1:
            vertical = False
        if not vertical and h < 2 * p.min_room + 1:
            vertical = True
        lo, hi = (x0, x1) if vertical else (y0, y1)
        make_corridor = (
            rng.random() < p.corridor_prob
            and (hi - lo + 1) >= 2 * p.min_room + p.corridor_width + 2
            and len(rects) + 2 < p.n_rooms + 1
        )
        if make_corridor:
            a = int(rng.integers(lo + p.min_room, hi - p.min_room - p.corridor_width))
            b = a + p.corridor_width + 1
            walls = [a, b]
        else:
            walls = [int(rng.integers(lo + p.min_room, hi - p.min_room + 1))]
        for wpos in walls:
            span_lo, span_hi = (y0, y1) if vertical else (x0, x1)
            dw = min(p.door_width, span_hi - span_lo + 1)
            d0 = int(rng.integers(span_lo, span_hi - dw + 2))
            if vertical:
                grid[y0 : y1 + 1, wpos] = True
                grid[d0 : d0 + dw, wpos] = False
            else:
                grid[wpos, x0 : x1 + 1] = True
                grid[wpos, d0 : d0 + dw] = False
        cuts = [lo - 1] + walls + [hi + 1]
        for k in range(len(cuts) - 1):
            a, b = cuts[k] + 1, cuts[k + 1] - 1
            if a > b:
                continue
            sub = (a, y0, b, y1) if vertical else (x0, a, x1, b)
            rects.append((sub, make_corridor and k == 1))
    return len(rects)


def _place_clutter(grid: np.ndarray, p: WorldParams, rng: np.random.Generator):
    H, W = grid.shape
    placed = 0
    for _ in range(p.n_clutter * 10):
        if placed >= p.n_clutter:
            break
        cw, ch = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        x0 = int(rng.integers(3, max(4, W - cw - 3)))
        y0 = int(rng.integers(3, max(4, H - ch - 3)))
        # keep a free margin so doorways stay open
        if grid[y0 - 2 : y0 + ch + 2, x0 - 2 : x0 + cw + 2].any():
            continue
        grid[y0 : y0 + ch, x0 : x0 + cw] = True
        if not _connected(~grid):
            grid[y0 : y0 + ch, x0 : x0 + cw] = False
            continue
        placed += 1


def generate_world(seed: int, params: WorldParams = WorldParams()) -> World:
    """Seeded rooms-and-corridors world with connected free space and
    ``params.n_targets`` targets at distinct free cell centers."""
    params.validate()
    W, H = params.width, params.height
    spec = GridSpec(MAP_RESOLUTION, W, H)
    for attempt in range(params.max_retries):
        rng = np.random.default_rng([int(seed), attempt])
        grid = np.zeros((H, W), dtype=bool)
        grid[0, :] = grid[-1, :] = True
        grid[:, 0] = grid[:, -1] = True
        if params.n_rooms > 1:
            _split_rooms(grid, params, rng)
        if params.n_clutter:
            _place_clutter(grid, params, rng)
        free = ~grid
        if not _connected(free):
            continue
        # targets keep one free cell of clearance from obstacles
        padded = np.pad(grid, 1, constant_values=True)
        near = np.zeros_like(grid)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                near |= padded[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
        spots = np.flatnonzero((free & ~near).ravel())
        if spots.size < params.n_targets:
            continue
        chosen = rng.choice(spots, size=params.n_targets, replace=False)
        targets = {
            i: cell_to_world((int(c % W), int(c // W)), spec) for i, c in enumerate(chosen.tolist())
        }
        return World(spec, grid, targets, seed=int(seed))
    raise WorldGenerationError(
        f"could not generate a connected world with {params.n_targets} targets "
        f"after {params.max_retries} attempts"
    )


# ------------------------------------------------------------------ file format

def dumps_world(world: World) -> str:
    spec = world.spec
    lines = [f"CONWORLD v1 {spec.width} {spec.height} {spec.resolution!r}"]
    for iy in range(spec.height):
        lines.append("".join("#" if v else "." for v in world.grid[iy]))
    for tid in sorted(world.targets):
        x, y = world.targets[tid]
        lines.append(f"target {tid} {x!r} {y!r}")
    return "\n".join(lines) + "\n"


def loads_world(text: str) -> World:
    """Parse the plain-text world format.  Row ``k`` after the header is ``iy = k``."""
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty world file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "CONWORLD" or head[1] != "v1":
        raise ValueError(f"bad world header: {lines[0]!r}")
    W, H, res = int(head[2]), int(head[3]), float(head[4])
    rows = lines[1 : 1 + H]
    if len(rows) != H or any(len(r) != W or set(r) - {"#", "."} for r in rows):
        raise ValueError("world rows do not match header dimensions")
    grid = np.array([[c == "#" for c in r] for r in rows], dtype=bool)
    targets = {}
    for ln in lines[1 + H :]:
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 4 or parts[0] != "target":
            raise ValueError(f"bad target line: {ln!r}")
        targets[int(parts[1])] = (float(parts[2]), float(parts[3]))
    return World(GridSpec(res, W, H), grid, targets)


def save_world(world: World, path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(dumps_world(world))


def load_world(path) -> World:
    with open(path) as f:
        return loads_world(f.read())


# ------------------------------------------------------------------ geodesics

def geodesic_from(world: World, cells) -> np.ndarray:
    """BFS step counts from a set of source cells over free space (-1 = unreachable)."""
    src = np.array([world.flat(c) for c in cells], dtype=np.int64)
    dist, _ = _kernels.bfs_tree(world.free_flat, world.spec.width, world.spec.height, src)
    return dist


def _target_distances(world: World, target_id) -> np.ndarray:
    key = ("tdist", target_id)
    d = world._cache.get(key)
    if d is None:
        d = geodesic_from(world, [world_to_cell(world.targets[target_id], world.spec)])
        world._cache[key] = d
    return d


def shortest_path_length(world: World, a: Pose2D, b) -> float:
    """4-connected shortest path length in meters from pose ``a`` to the cell
    containing position ``b`` (or to the nearest of an iterable of cells)."""
    spec = world.spec
    start = world_to_cell(a.position, spec)
    if not world.is_free(start):
        raise ValueError("start pose is not in free space")
    if len(b) == 2 and all(isinstance(v, (int, float, np.floating)) and not isinstance(v, bool) for v in b) \
            and not isinstance(b, CellIndex):
        goals = [world_to_cell(b, spec)]
    else:
        goals = list(b)
    goal_ids = [world.flat(g) for g in goals if world.is_free(g)]
    if not goal_ids:
        raise UnreachableError("no goal cell lies in free space")
    dist = geodesic_from(world, [start])
    d = dist[goal_ids]
    d = d[d >= 0]
    if d.size == 0:
        raise UnreachableError("goal unreachable from start")
    return int(d.min()) * spec.resolution


def detection_region(world: World, target_id, fov: FovModel = FovModel()) -> np.ndarray:
    """Flat ids of cells where some axis heading detects the target."""
    key = ("detreg", target_id, fov)
    hit = world._cache.get(key)
    if hit is not None:
        return hit
    spec = world.spec
    tx, ty = world.targets[target_id]
    r = int(math.ceil(fov.detection_radius / spec.resolution)) + 1
    tc = world_to_cell((tx, ty), spec)
    out = []
    for iy in range(max(0, tc.iy - r), min(spec.height, tc.iy + r + 1)):
        for ix in range(max(0, tc.ix - r), min(spec.width, tc.ix + r + 1)):
            if world.grid[iy, ix]:
                continue
            x, y = cell_to_world((ix, iy), spec)
            for h in AXIS_HEADINGS:
                pose = Pose2D(x, y, h)
                if _in_arc(pose, (tx, ty), fov.detection_radius, fov.view_angle) and \
                        detect_target(world, pose, target_id, fov):
                    out.append(iy * spec.width + ix)
                    break
    hit = np.array(out, dtype=np.int64)
    world._cache[key] = hit
    return hit


def student_start_pose(world: World, target_id, seed: int) -> Pose2D:
    """Free cell whose geodesic distance to the target is nearest 3.2 m,
    drawn uniformly, with a uniform random heading."""
    rng = np.random.default_rng([int(seed), int(target_id), 2])
    dist = _target_distances(world, target_id)
    want = STUDENT_START_DISTANCE / world.spec.resolution
    ok = np.flatnonzero(dist > 0)
    if ok.size == 0:
        raise NoStartPoseError(f"target {target_id} has no reachable free cells")
    gap = np.abs(dist[ok] - want)
    pool = ok[gap == gap.min()]
    c = int(pool[rng.integers(pool.size)])
    x, y = cell_to_world(world.cell_of(c), world.spec)
    return Pose2D(x, y, rng.uniform(-math.pi, math.pi))


# ------------------------------------------------------------------ teacher

@dataclass(frozen=True)
class Trajectory:
    poses: Tuple[Pose2D, ...]

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    @property
    def steps(self) -> range:
        return range(len(self.poses))


def _teacher_start(world: World, target_id, fov: FovModel, rng) -> Pose2D:
    spec = world.spec
    tx, ty = world.targets[target_id]
    tc = world_to_cell((tx, ty), spec)
    r = int(math.ceil(fov.detection_radius / spec.resolution))
    cands = []
    for iy in range(max(0, tc.iy - r), min(spec.height, tc.iy + r + 1)):
        for ix in range(max(0, tc.ix - r), min(spec.width, tc.ix + r + 1)):
            if (ix, iy) == tuple(tc) or world.grid[iy, ix]:
                continue
            x, y = cell_to_world((ix, iy), spec)
            if math.hypot(tx - x, ty - y) <= fov.detection_radius:
                cands.append((ix, iy))
    order = rng.permutation(len(cands))
    for k in order:
        x, y = cell_to_world(cands[k], spec)
        theta = math.atan2(ty - y, tx - x) + rng.uniform(-0.45, 0.45) * fov.view_angle
        pose = Pose2D(x, y, theta)
        if detect_target(world, pose, target_id, fov):
            return pose
    raise NoStartPoseError(f"no pose detects target {target_id}")


def _walk_to(world: World, poses: list, goal: int, budget: Optional[int] = None) -> int:
    """Append shortest-path moves from the last pose to flat cell ``goal``."""
    spec = world.spec
    W = spec.width
    cur = world.flat(world_to_cell(poses[-1].position, spec))
    dist, parent = _kernels.bfs_tree(world.free_flat, W, spec.height, np.array([cur], dtype=np.int64))
    if dist[goal] < 0:
        raise UnreachableError("teacher goal unreachable")
    path = [goal]
    while path[-1] != cur:
        path.append(int(parent[path[-1]]))
    path.reverse()
    n = 0
    for a, b in zip(path[:-1], path[1:]):
        if budget is not None and n >= budget:
            break
        h = _kernels.heading_code(a, b, W)
        x, y = cell_to_world((b % W, b // W), spec)
        poses.append(Pose2D(x, y, AXIS_HEADINGS[h]))
        n += 1
    return n


LOOK_AROUND_TURNS = 7


def _look_around(poses: list) -> None:
    p = poses[-1]
    for k in range(1, LOOK_AROUND_TURNS + 1):
        poses.append(Pose2D(p.x, p.y, p.theta + k * math.pi / 4))


def generate_teacher_trajectory(
    world: World,
    target_id,
    scenario: str,
    seed: int,
    fov: FovModel = FovModel(),
    steps: int = 2000,
    look_around: bool = True,
) -> Trajectory:
    """Teacher history for one target.

    Starts at a random pose that detects the target and runs a seeded
    coverage walk of ``steps`` moves, repeatedly heading for a random cell it
    has not observed yet.  With ``look_around`` the teacher turns in place
    through a full circle in 45 degree steps the first time it enters each
    1 m place cell.  Only moves
    count against ``steps``.  For ``constrained_start_goal`` the walk then
    continues to the student's start pose and ends there.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if target_id not in world.targets:
        raise KeyError(f"unknown target id {target_id!r}")
    rng = np.random.default_rng([int(seed), int(target_id), 1])
    poses = [_teacher_start(world, target_id, fov, rng)]
    observed = np.zeros(world.spec.n_cells, dtype=bool)
    free = world.free_flat.astype(bool)
    surveyed = set()

    def survey(first: int) -> None:
        # re-append the poses from ``first`` on, turning in each new place
        walked = poses[first:]
        del poses[first:]
        for p in walked:
            poses.append(p)
            place = (math.floor(p.x / PLACE_CELL_SIZE), math.floor(p.y / PLACE_CELL_SIZE))
            if look_around and place not in surveyed:
                surveyed.add(place)
                _look_around(poses)

    done = 0
    seen = 0
    while done < steps:
        survey(seen)
        for p in poses[seen:]:
            observed[observe(world, p, fov)[0]] = True
        seen = len(poses)
        pool = np.flatnonzero(free & ~observed)
        if pool.size == 0:
            pool = np.flatnonzero(free)
        goal = int(pool[rng.integers(pool.size)])
        moved = _walk_to(world, poses, goal, budget=steps - done)
        done += moved
        if moved == 0 and pool.size == 1:
            break
    survey(seen)
    if scenario == "constrained_start_goal":
        start = student_start_pose(world, target_id, seed)
        goal = world.flat(world_to_cell(start.position, world.spec))
        _walk_to(world, poses, goal)
        if poses[-1] != start:
            poses.append(start)
    return Trajectory(tuple(poses))


__all__ = [
    "ACTIONS",
    "AgentState",
    "CollisionError",
    "FovModel",
    "NoStartPoseError",
    "SCENARIOS",
    "Trajectory",
    "UnreachableError",
    "World",
    "WorldGenerationError",
    "WorldParams",
    "action_towards",
    "detect_target",
    "detection_region",
    "dumps_world",
    "generate_teacher_trajectory",
    "generate_world",
    "load_world",
    "loads_world",
    "observe",
    "save_world",
    "shortest_path_length",
    "step_agent",
    "student_start_pose",
    "visible_cells",
]

"""Episode orchestration, SPL, configuration matrices and CSV output."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .grid import GridSpec, Pose2D, ScoredGrid, pose_to_place_class, world_to_cell
from .perception import (
    DESCRIPTOR_DIM,
    N_HYPOTHESES,
    SPARSITY_THRESHOLD,
    LocalizationModel,
    TeacherDataset,
    build_dataset,
    embed_view,
    target_query,
)
from .planner import (
    WAYPOINT_SPACING,
    ExplorationComplete,
    ObstacleMap,
    PathTree,
    Subgoal,
    Terminal,
    VisitedMask,
    candidate_cells,
    frontier_baseline_select,
    local_plan_step,
    plan_subgoal,
    score_candidates,
    select_best,
)
from .protocol import ByteLedger, LocalizationQuery, StudentProxy, decode_response, encode_query, merge_maps
from .world import (
    SCENARIOS,
    AgentState,
    CollisionError,
    FovModel,
    World,
    WorldParams,
    detect_target,
    detection_region,
    generate_teacher_trajectory,
    generate_world,
    geodesic_from,
    observe,
    step_agent,
    student_start_pose,
)

log = logging.getLogger(__name__)

METHODS = ("proposed", "w/o_merge", "frontier")
DEFAULT_STEP_BUDGET = 4000

CSV_COLUMNS = (
    "world", "scenario", "method", "pe", "target_id", "seed", "success", "p", "l",
    "spl_term", "query_bytes", "response_bytes", "merges", "steps",
)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one episode needs besides the world, target and seed."""

    scenario: str = "constrained_start"
    method: str = "proposed"
    pe: float = 0.0
    step_budget: int = DEFAULT_STEP_BUDGET
    fov: FovModel = FovModel()
    waypoint_spacing: float = WAYPOINT_SPACING
    theta: float = SPARSITY_THRESHOLD
    tau: float = 0.0
    dim: int = DESCRIPTOR_DIM
    n_hyp: int = N_HYPOTHESES
    teacher_steps: int = 2000
    weighted_merge: bool = True

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 <= self.pe <= 1.0:
            raise ValueError("pe must lie in [0, 1]")
        if self.step_budget < 0:
            raise ValueError("step_budget must be >= 0")
        if self.waypoint_spacing <= 0:
            raise ValueError("waypoint_spacing must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not 1 <= self.n_hyp <= 5:
            raise ValueError("n_hyp must lie in [1, 5]")
        if self.teacher_steps < 0:
            raise ValueError("teacher_steps must be >= 0")


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    p: float
    l: float
    steps: int = 0
    query_bytes: int = 0
    response_bytes: int = 0
    merges: int = 0
    target_id: int = -1
    seed: int = 0

    @property
    def spl_term(self) -> float:
        if self.l <= 0:
            return float("nan")
        return float(self.success) * self.l / max(self.p, self.l)


def compute_spl(results: Sequence[EpisodeResult]) -> float:
    """Mean of ``s * l / max(p, l)``.  Episodes with ``l <= 0`` are left
    out (and logged) since their term is undefined."""
    results = list(results)
    if not results:
        raise ValueError("compute_spl needs at least one episode")
    kept = [r for r in results if r.l > 0]
    if len(kept) < len(results):
        log.info("excluded %d episode(s) with l <= 0", len(results) - len(kept))
    if not kept:
        raise ValueError("every episode has l <= 0")
    total = math.fsum(float(r.success) * r.l / max(r.p, r.l) for r in kept)
    return total / len(kept)


# ------------------------------------------------------------------ episodes

def success_region(world: World, target_id, theta0: float, fov: FovModel) -> np.ndarray:
    """Flat ids of cells from which the agent could detect the target: any
    axis heading, or the episode's initial heading (kept by backward moves)."""
    spec = world.spec
    tx, ty = world.targets[target_id]
    tc = world_to_cell((tx, ty), spec)
    r = int(math.ceil(fov.detection_radius / spec.resolution)) + 1
    extra = []
    for iy in range(max(0, tc.iy - r), min(spec.height, tc.iy + r + 1)):
        for ix in range(max(0, tc.ix - r), min(spec.width, tc.ix + r + 1)):
            if world.grid[iy, ix]:
                continue
            pose = Pose2D(spec.origin[0] + (ix + 0.5) * spec.resolution,
                          spec.origin[1] + (iy + 0.5) * spec.resolution, theta0)
            if detect_target(world, pose, target_id, fov):
                extra.append(iy * spec.width + ix)
    return np.union1d(detection_region(world, target_id, fov), np.array(extra, dtype=np.int64))


def optimal_length(world: World, start: Pose2D, target_id, fov: FovModel) -> float:
    """Shortest path length (m) from the start to any pose that detects the
    target; 0 when the start already does."""
    if detect_target(world, start, target_id, fov):
        return 0.0
    region = success_region(world, target_id, start.theta, fov)
    if region.size == 0:
        raise ValueError(f"target {target_id} cannot be detected from anywhere")
    dist = geodesic_from(world, [world_to_cell(start.position, world.spec)])
    d = dist[region]
    d = d[d >= 0]
    if d.size == 0:
        raise ValueError(f"target {target_id} unreachable from the start")
    return int(d.min()) * world.spec.resolution


@dataclass
class TeacherKit:
    """A teacher dataset plus the object maps built from it so far."""

    dataset: TeacherDataset
    maps: dict = field(default_factory=dict)


def build_teacher(world: World, target_id, seed: int, cfg: ScenarioConfig) -> TeacherKit:
    traj = generate_teacher_trajectory(world, target_id, cfg.scenario, seed, cfg.fov, cfg.teacher_steps)
    return TeacherKit(build_dataset(world, traj, cfg.fov, cfg.dim))


class _StudentMap:
    """The student's object map: its own view scores folded max/sum into
    dense arrays, plus the teacher content merged over the protocol."""

    def __init__(self, spec: GridSpec, query: np.ndarray, theta: float, weighted: bool = True):
        self.spec = spec
        self.weighted = weighted
        self.query = query
        self.theta = theta
        self.own_p = np.zeros(spec.n_cells)
        self.own_s = np.zeros(spec.n_cells)
        self.merged = ScoredGrid.empty(spec)
        self._merged_dense = (np.zeros(spec.n_cells), np.zeros(spec.n_cells))

    def add_view(self, view: np.ndarray, vis: np.ndarray) -> None:
        s = min(max(float(view @ self.query), 0.0), 1.0)
        if s < self.theta or vis.size == 0:
            return
        self.own_p[vis] = np.maximum(self.own_p[vis], s)
        self.own_s[vis] += s

    def merge(self, response) -> bool:
        before = self.merged
        self.merged = merge_maps(self.merged, response, self.weighted)
        if self.merged is before:
            return False
        P, S = self.merged.to_dense()
        self._merged_dense = (P.ravel(), S.ravel())
        return True

    def scores(self, visited: VisitedMask):
        mp, ms = self._merged_dense
        P = np.maximum(self.own_p, mp)
        S = self.own_s + ms
        P[visited.mask] = 0.0
        S[visited.mask] = 0.0
        return P, S


def _plan(method, obst: ObstacleMap, here, smap: Optional[_StudentMap], visited, reached, cfg, rng) -> Subgoal:
    # subgoals already reached are not offered again, so a frontier cell
    # that arrival did not resolve cannot trap the agent
    spec = obst.spec
    tree = PathTree(obst, here)
    if method == "frontier":
        return frontier_baseline_select(obst, rng, tree, reached)
    cands = candidate_cells(obst, tree, reached)
    P, S = smap.scores(visited)
    vp, vs = score_candidates(tree, cands, P, S, obst, cfg.fov, cfg.waypoint_spacing)
    j = select_best(cands, vp, vs, spec.width)
    return plan_subgoal(obst, tree, obst.cell_of(int(cands[j])), vp[j], vs[j])


def run_episode(world: World, cfg: ScenarioConfig, target_id, seed: int,
                teacher: Optional[TeacherKit] = None) -> EpisodeResult:
    """One student episode.  ``teacher`` may carry a prebuilt dataset for
    ``(world, target_id, cfg.scenario, seed)``."""
    if target_id not in world.targets:
        raise KeyError(f"unknown target id {target_id!r}")
    spec = world.spec
    fov = cfg.fov
    start = student_start_pose(world, target_id, seed)
    length = optimal_length(world, start, target_id, fov)
    frontier_rng = np.random.default_rng([int(seed), int(target_id), 4])
    ledger = ByteLedger()
    merges = 0

    use_map = cfg.method != "frontier"
    smap = (_StudentMap(spec, target_query(world, target_id, fov, cfg.dim), cfg.theta, cfg.weighted_merge)
            if use_map else None)
    proxy = None
    if cfg.method == "proposed":
        if teacher is None:
            teacher = build_teacher(world, target_id, seed, cfg)
        model = LocalizationModel(cfg.pe, np.random.default_rng([int(seed), int(target_id), 3]))
        proxy = StudentProxy(teacher.dataset, model, n_hyp=cfg.n_hyp, tau=cfg.tau, theta=cfg.theta,
                             map_cache=teacher.maps)

    state = AgentState(start)
    obst = ObstacleMap(spec)
    visited = VisitedMask(spec)
    reached = np.zeros(spec.n_cells, dtype=bool)

    def sense(pose: Pose2D) -> bool:
        vis, hits = observe(world, pose, fov)
        obst.mark_free(vis)
        obst.mark_occupied(hits)
        if smap is not None:
            smap.add_view(embed_view(world, pose, fov, cfg.dim), vis)
        visited.add(pose.position)
        return detect_target(world, pose, target_id, fov)

    def exchange(pose: Pose2D) -> None:
        nonlocal merges
        q = LocalizationQuery(embed_view(world, pose, fov, cfg.dim), smap.query, pose)
        qb = encode_query(q)
        ledger.record_query(qb)
        # the student frame coincides with the teacher frame, so the oracle
        # place class is the student's own
        rb = proxy.handle_bytes(qb, pose_to_place_class(pose))
        ledger.record_response(rb)
        if smap.merge(decode_response(rb)):
            merges += 1

    def result(success: bool, steps: int) -> EpisodeResult:
        r = EpisodeResult(bool(success), state.distance_traveled, length, steps, ledger.query_bytes,
                          ledger.response_bytes, merges, int(target_id), int(seed))
        if r.success and r.p < r.l - 1e-9:
            raise AssertionError(f"path {r.p} shorter than optimum {r.l}")
        return r

    if sense(start):
        return result(True, 0)
    steps = 0
    if cfg.step_budget == 0:
        return result(False, 0)
    if proxy is not None:
        exchange(start)
    need_plan = True
    subgoal = None
    while steps < cfg.step_budget:
        here = world_to_cell(state.pose.position, spec)
        if need_plan:
            try:
                subgoal = _plan(cfg.method, obst, here, smap, visited, reached, cfg, frontier_rng)
            except ExplorationComplete:
                return result(False, steps)
            need_plan = False
        act = local_plan_step(obst, state.pose, subgoal)
        if isinstance(act, Terminal):
            if act is Terminal.REACHED:
                reached[obst.flat(subgoal.cell)] = True
                if proxy is not None:
                    exchange(state.pose)
            need_plan = True
            continue
        steps += 1
        try:
            state = step_agent(world, state, act)
        except CollisionError as err:
            obst.mark_occupied([world.flat(err.cell)])
            need_plan = True
            continue
        if sense(state.pose):
            return result(True, steps)
    return result(False, steps)


# ------------------------------------------------------------------ experiments

@dataclass(frozen=True)
class ExperimentConfig:
    """A run matrix: scenarios x methods x pe values x worlds x targets x seeds."""

    scenarios: Tuple[str, ...] = SCENARIOS
    methods: Tuple[str, ...] = METHODS
    pes: Tuple[float, ...] = (0.0,)
    world_seeds: Tuple[int, ...] = (0,)
    seeds: Tuple[int, ...] = (0,)
    n_targets: int = 100
    step_budget: int = DEFAULT_STEP_BUDGET
    view_radius: float = 3.2
    view_angle_deg: float = 40.0
    detection_radius: float = 1.6
    waypoint_spacing: float = WAYPOINT_SPACING
    theta: float = SPARSITY_THRESHOLD
    tau: float = 0.0
    dim: int = DESCRIPTOR_DIM
    n_hyp: int = N_HYPOTHESES
    teacher_steps: int = 2000
    world_width: int = WorldParams.width
    world_height: int = WorldParams.height
    n_rooms: int = WorldParams.n_rooms

    def __post_init__(self):
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if not self.scenarios or not self.methods or not self.pes or not self.world_seeds or not self.seeds:
            raise ValueError("every matrix axis needs at least one value")
        if self.n_targets < 1:
            raise ValueError("n_targets must be >= 1")
        self.scenario_config(self.scenarios[0], self.methods[0], self.pes[0])
        self.world_params().validate()

    @property
    def fov(self) -> FovModel:
        return FovModel(self.view_radius, math.radians(self.view_angle_deg), self.detection_radius)

    def world_params(self) -> WorldParams:
        return replace(WorldParams(), width=self.world_width, height=self.world_height,
                       n_rooms=self.n_rooms, n_targets=max(self.n_targets, WorldParams.n_targets))

    def scenario_config(self, scenario: str, method: str, pe: float) -> ScenarioConfig:
        return ScenarioConfig(
            scenario=scenario, method=method, pe=float(pe), step_budget=self.step_budget, fov=self.fov,
            waypoint_spacing=self.waypoint_spacing, theta=self.theta, tau=self.tau, dim=self.dim,
            n_hyp=self.n_hyp, teacher_steps=self.teacher_steps,
        )


_LIST_KEYS = {"scenarios": str, "methods": str, "pes": float, "world_seeds": int, "seeds": int}


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, list values are
    comma separated.  Unknown or repeated keys are errors."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    scalar = {"n_targets": int, "step_budget": int, "dim": int, "n_hyp": int, "teacher_steps": int,
              "world_width": int, "world_height": int, "n_rooms": int}
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in kw:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _LIST_KEYS:
                kw[key] = tuple(_LIST_KEYS[key](v.strip()) for v in value.split(",") if v.strip())
            else:
                kw[key] = scalar.get(key, float)(value)
        except ValueError as err:
            raise ValueError(f"line {lineno}: bad value for {key!r}: {err}") from None
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


@dataclass
class Row:
    world: int
    scenario: str
    method: str
    pe: float
    result: EpisodeResult

    def key(self):
        return (self.world, SCENARIOS.index(self.scenario), METHODS.index(self.method), self.pe,
                self.result.target_id, self.result.seed)

    def values(self):
        r = self.result
        return [self.world, self.scenario, self.method, repr(self.pe), r.target_id, r.seed, int(r.success),
                repr(r.p), repr(r.l), repr(r.spl_term), r.query_bytes, r.response_bytes, r.merges, r.steps]


@dataclass
class RunSummary:
    """Per-curve SPL terms keyed by ``(scenario, method, pe)``."""

    terms: Dict[Tuple[str, str, float], List[float]] = field(default_factory=dict)
    bytes: Dict[Tuple[str, str, float], List[int]] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)

    def mean_spl(self, scenario: str, method: str, pe: float) -> float:
        t = self.terms[(scenario, method, float(pe))]
        return math.fsum(t) / len(t)

    def sorted_series(self, scenario: str, method: str, pe: float) -> List[float]:
        """SPL terms sorted independently per curve, in descending order."""
        return sorted(self.terms[(scenario, method, float(pe))], reverse=True)

    def curves(self):
        return sorted(self.terms, key=lambda k: (SCENARIOS.index(k[0]), METHODS.index(k[1]), k[2]))

    def byte_stats(self, scenario: str, method: str, pe: float) -> Tuple[float, int]:
        b = self.bytes.get((scenario, method, float(pe)), [0])
        return float(np.mean(b)), int(max(b))

    def lines(self) -> List[str]:
        out = []
        for k in self.curves():
            mean_b, max_b = self.byte_stats(*k)
            out.append(f"{k[0]} {k[1]} pe={k[2]!r} n={len(self.terms[k])} "
                       f"spl={self.mean_spl(*k):.4f} bytes_mean={mean_b:.1f} bytes_max={max_b}")
        return out


def summarize(rows: Iterable[Row]) -> RunSummary:
    summ = RunSummary()
    for row in rows:
        r = row.result
        if r.l <= 0:
            continue
        k = (row.scenario, row.method, float(row.pe))
        summ.terms.setdefault(k, []).append(r.spl_term)
        summ.bytes.setdefault(k, []).append(r.query_bytes + r.response_bytes)
    return summ


def rows_to_csv(rows: Sequence[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_COLUMNS)
    for row in sorted(rows, key=Row.key):
        w.writerow(row.values())
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, progress=None) -> Tuple[RunSummary, str, List[Row]]:
    """Run every cell of the matrix.  Returns the summary, the CSV text and
    the rows.  A failing cell is logged and skipped."""
    rows: List[Row] = []
    failures = []
    params = cfg.world_params()
    for ws in cfg.world_seeds:
        world = generate_world(ws, params)
        targets = sorted(world.targets)[: cfg.n_targets]
        for tid in targets:
            for seed in cfg.seeds:
                for scen in cfg.scenarios:
                    kit = None
                    for method in cfg.methods:
                        shared = None  # baselines never localize, so pe cannot change them
                        for pe in cfg.pes:
                            sc = cfg.scenario_config(scen, method, pe)
                            try:
                                if method == "proposed":
                                    if kit is None:
                                        kit = build_teacher(world, tid, seed, sc)
                                    res = run_episode(world, sc, tid, seed, kit)
                                else:
                                    if shared is None:
                                        shared = run_episode(world, sc, tid, seed)
                                    res = shared
                            except Exception as err:  # keep going, but record it
                                msg = f"world={ws} {scen} {method} pe={pe} target={tid} seed={seed}: {err!r}"
                                log.warning("episode failed: %s", msg)
                                failures.append(msg)
                                continue
                            rows.append(Row(ws, scen, method, float(pe), res))
                    if progress is not None:
                        progress(ws, tid, seed, scen)
        del world
    summary = summarize(rows)
    summary.failures = failures
    return summary, rows_to_csv(rows), rows


def read_results_csv(text: str) -> List[Row]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        res = EpisodeResult(
            success=bool(int(rec["success"])), p=float(rec["p"]), l=float(rec["l"]), steps=int(rec["steps"]),
            query_bytes=int(rec["query_bytes"]), response_bytes=int(rec["response_bytes"]),
            merges=int(rec["merges"]), target_id=int(rec["target_id"]), seed=int(rec["seed"]),
        )
        rows.append(Row(int(rec["world"]), rec["scenario"], rec["method"], float(rec["pe"]), res))
    return rows


__all__ = [
    "CSV_COLUMNS",
    "EpisodeResult",
    "ExperimentConfig",
    "METHODS",
    "Row",
    "RunSummary",
    "ScenarioConfig",
    "TeacherKit",
    "build_teacher",
    "compute_spl",
    "load_config",
    "optimal_length",
    "parse_config",
    "read_results_csv",
    "rows_to_csv",
    "run_episode",
    "run_experiment",
    "summarize",
]

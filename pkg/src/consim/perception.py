"""Synthetic perception: view descriptors, target similarity, object maps
built from view datasets, and a self-localization model that fails at a
preset rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .grid import (
    CellIndex,
    GridSpec,
    PlaceClass,
    Pose2D,
    SE2Transform,
    ScoredGrid,
    place_center_pose,
    pose_to_place_class,
    se2_compose,
    world_to_cell,
)
from .world import AXIS_HEADINGS, FovModel, World, detect_target, observe

DESCRIPTOR_DIM = 64
#: cells whose primary score falls below this are left out of object maps
SPARSITY_THRESHOLD = 0.05
N_HYPOTHESES = 5

# feature weights: a visible target counts for much more than one wall patch
TARGET_WEIGHT = 1.0
WALL_WEIGHT = 0.03
WALL_BLOCK = 1.0

_KIND_TARGET = 1
_KIND_WALL = 2
_KIND_EMPTY = 3


@lru_cache(maxsize=65536)
def feature_vector(kind: int, a: int, b: int, dim: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector for one feature key."""
    rng = np.random.default_rng([kind, a & 0xFFFFFFFF, b & 0xFFFFFFFF, dim])
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.flags.writeable = False
    return v


def compose_descriptor(features: Iterable[Tuple[int, int, int, float]], dim: int = DESCRIPTOR_DIM) -> np.ndarray:
    """Normalized weighted sum of feature vectors ``(kind, a, b, weight)``.

    Summation runs in sorted key order so equal multisets give identical bits.
    """
    acc = np.zeros(dim)
    for kind, a, b, w in sorted(features):
        acc += w * feature_vector(kind, a, b, dim)
    n = np.linalg.norm(acc)
    if n < 1e-12:
        return feature_vector(_KIND_EMPTY, 0, 0, dim).copy()
    return acc / n


def view_features(world: World, pose: Pose2D, fov: FovModel):
    vis, hits = observe(world, pose, fov)
    feats = []
    spec = world.spec
    if len(world.targets):
        tkey = ("tcells",)
        tcells = world._cache.get(tkey)
        if tcells is None:
            ids = sorted(world.targets)
            tcells = (
                np.array([world.flat(world_to_cell(world.targets[t], spec)) for t in ids], dtype=np.int64),
                np.array(ids, dtype=np.int64),
            )
            world._cache[tkey] = tcells
        seen = np.isin(tcells[0], vis)
        for t in tcells[1][seen]:
            feats.append((_KIND_TARGET, int(t), 0, TARGET_WEIGHT))
    if hits.size:
        blk = int(round(WALL_BLOCK / spec.resolution))
        bx = (hits % spec.width) // blk
        by = (hits // spec.width) // blk
        keys, counts = np.unique(np.stack([bx, by], 1), axis=0, return_counts=True)
        for (x, y), c in zip(keys.tolist(), counts.tolist()):
            feats.append((_KIND_WALL, x, y, WALL_WEIGHT * c))
    return feats


def embed_view(world: World, pose: Pose2D, fov: FovModel = FovModel(), dim: int = DESCRIPTOR_DIM) -> np.ndarray:
    """Unit descriptor of what the pose sees: visible targets plus the visible
    obstacle surface binned into 1 m blocks."""
    key = ("emb", pose.x, pose.y, pose.theta, fov.view_radius, fov.view_angle, dim)
    v = world._cache.get(key)
    if v is None:
        v = compose_descriptor(view_features(world, pose, fov), dim)
        v.flags.writeable = False
        world._cache[key] = v
    return v


def similarity(a, b) -> float:
    """Cosine similarity clamped to [0, 1]."""
    c = float(np.dot(a, b))
    return min(max(c, 0.0), 1.0)


def target_query(world: World, target_id, fov: FovModel = FovModel(), dim: int = DESCRIPTOR_DIM) -> np.ndarray:
    """Descriptor standing in for the target image.

    Taken from the detecting cell-center pose (axis heading) whose view is
    most dominated by the target, i.e. has the largest component along the
    target's feature vector; ties go to the smallest ``(iy, ix, h)``.
    """
    key = ("tq", target_id, fov, dim)
    hit = world._cache.get(key)
    if hit is not None:
        return hit
    spec = world.spec
    tx, ty = world.targets[target_id]
    tc = world_to_cell((tx, ty), spec)
    tvec = feature_vector(_KIND_TARGET, int(target_id), 0, dim)
    r = int(math.ceil(fov.detection_radius / spec.resolution))
    best = None
    for iy in range(max(0, tc.iy - r), min(spec.height, tc.iy + r + 1)):
        for ix in range(max(0, tc.ix - r), min(spec.width, tc.ix + r + 1)):
            if world.grid[iy, ix] or (ix, iy) == tuple(tc):
                continue
            x = spec.origin[0] + (ix + 0.5) * spec.resolution
            y = spec.origin[1] + (iy + 0.5) * spec.resolution
            for h, theta in enumerate(AXIS_HEADINGS):
                pose = Pose2D(x, y, theta)
                if not detect_target(world, pose, target_id, fov):
                    continue
                v = embed_view(world, pose, fov, dim)
                cand = (-round(float(v @ tvec), 12), iy, ix, h)
                if best is None or cand < best[0]:
                    best = (cand, v)
    if best is None:
        raise ValueError(f"no pose detects target {target_id}")
    world._cache[key] = best[1]
    return best[1]


# ------------------------------------------------------------------ datasets

@dataclass(frozen=True)
class DatasetRecord:
    pose: Pose2D
    view: np.ndarray
    observed_ids: np.ndarray = field(repr=False)
    spec: GridSpec = field(repr=False)

    @property
    def observed(self) -> frozenset:
        w = self.spec.width
        return frozenset(CellIndex(int(i % w), int(i // w)) for i in self.observed_ids)


class TeacherDataset:
    """Ordered records of (pose, view descriptor, observed cells)."""

    def __init__(self, spec: GridSpec, records: Sequence[DatasetRecord]):
        records = tuple(records)
        if not records:
            raise ValueError("a dataset needs at least one record")
        for r in records:
            ids = r.observed_ids
            if ids.size and (ids.min() < 0 or ids.max() >= spec.n_cells):
                raise ValueError("observed cells must be in bounds")
        self.spec = spec
        self.records = records
        self._groups = None
        self._universe = None

    @classmethod
    def from_cells(cls, spec: GridSpec, items) -> "TeacherDataset":
        """Build from ``(pose, view, iterable of (ix, iy))`` triples."""
        recs = []
        for pose, view, cells in items:
            ids = np.array(sorted(iy * spec.width + ix for ix, iy in cells), dtype=np.int64)
            recs.append(DatasetRecord(pose, np.asarray(view, dtype=np.float64), ids, spec))
        return cls(spec, recs)

    def __len__(self):
        return len(self.records)

    def place_universe(self) -> Tuple[PlaceClass, ...]:
        if self._universe is None:
            self._universe = tuple(sorted({pose_to_place_class(r.pose) for r in self.records}))
        return self._universe

    def grouped(self):
        """Records collapsed by identical (view, observed) content, in a
        canonical order: ``(views, counts, [ids...])``."""
        if self._groups is None:
            table = {}
            for r in self.records:
                key = (r.view.tobytes(), r.observed_ids.tobytes())
                hit = table.get(key)
                if hit is None:
                    table[key] = [r.view, r.observed_ids, 1]
                else:
                    hit[2] += 1
            keys = sorted(table)
            views = np.array([table[k][0] for k in keys])
            counts = np.array([table[k][2] for k in keys], dtype=np.float64)
            ids = [table[k][1] for k in keys]
            self._groups = (views, counts, ids)
        return self._groups


def build_dataset(world: World, trajectory, fov: FovModel = FovModel(), dim: int = DESCRIPTOR_DIM) -> TeacherDataset:
    recs = []
    for pose in trajectory:
        vis, _ = observe(world, pose, fov)
        recs.append(DatasetRecord(pose, embed_view(world, pose, fov, dim), vis.astype(np.int64), world.spec))
    return TeacherDataset(world.spec, recs)


def build_object_map(dataset: TeacherDataset, query, theta: float = SPARSITY_THRESHOLD) -> ScoredGrid:
    """Object map for one query: each record's similarity is spread over its
    observed cells; per cell primary is the max and secondary the sum."""
    views, counts, ids = dataset.grouped()
    sims = np.clip(views @ np.asarray(query, dtype=np.float64), 0.0, 1.0)
    n = dataset.spec.n_cells
    lens = np.array([a.size for a in ids])
    flat = np.concatenate(ids) if ids else np.zeros(0, np.int64)
    P = np.zeros(n)
    np.maximum.at(P, flat, np.repeat(sims, lens))
    S = np.bincount(flat, weights=np.repeat(sims * counts, lens), minlength=n)
    keep = P >= theta
    keys = np.flatnonzero(keep)
    return ScoredGrid(dataset.spec, keys, P[keys], S[keys])


# ------------------------------------------------------------------ localization

@dataclass
class LocalizationModel:
    """Oracle place classifier that returns a random class with probability
    ``failure_rate``."""

    failure_rate: float
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if not (0.0 <= self.failure_rate <= 1.0):
            raise ValueError("failure_rate must lie in [0, 1]")


@dataclass(frozen=True)
class Hypothesis:
    place: PlaceClass
    likelihood: float
    transform: SE2Transform


def hypothesis_weights(n: int) -> np.ndarray:
    w = 0.5 ** np.arange(1, n + 1)
    return w / w.sum()


def anchor_transform(hyp_place: PlaceClass, student_place: PlaceClass) -> SE2Transform:
    """Teacher-frame -> student-frame transform that puts the hypothesized
    place's anchor pose onto the student's own place anchor."""
    return se2_compose(
        SE2Transform.from_pose(place_center_pose(student_place)),
        SE2Transform.from_pose(place_center_pose(hyp_place)).inverse(),
    )


def localize(
    model: LocalizationModel,
    true_place: PlaceClass,
    class_universe: Iterable[PlaceClass],
    n: int = N_HYPOTHESES,
    student_place: Optional[PlaceClass] = None,
) -> List[Hypothesis]:
    """Ranked place hypotheses.

    Rank 1 is ``true_place`` with probability ``1 - failure_rate`` and a
    uniform draw from the universe otherwise; later ranks are distinct
    uniform draws.  ``student_place`` anchors the transforms and defaults to
    ``true_place``.
    """
    universe = sorted(set(class_universe))
    if true_place not in universe:
        raise ValueError("true_place must belong to the class universe")
    if n < 1:
        raise ValueError("n must be >= 1")
    n = min(n, len(universe))
    rng = model.rng
    if rng.random() < model.failure_rate:
        first = universe[int(rng.integers(len(universe)))]
    else:
        first = true_place
    ranked = [first]
    if n > 1:
        rest = [p for p in universe if p != first]
        picks = rng.choice(len(rest), size=n - 1, replace=False)
        ranked += [rest[int(i)] for i in picks]
    anchor = student_place if student_place is not None else true_place
    weights = hypothesis_weights(n)
    return [Hypothesis(p, float(w), anchor_transform(p, anchor)) for p, w in zip(ranked, weights)]


def outlier_check(hyps: Sequence[Hypothesis], tau: float = 0.0) -> bool:
    """True (accept) iff the top hypothesis has likelihood at least ``tau``."""
    if not hyps:
        return False
    return hyps[0].likelihood >= tau


__all__ = [
    "DESCRIPTOR_DIM",
    "DatasetRecord",
    "Hypothesis",
    "LocalizationModel",
    "N_HYPOTHESES",
    "SPARSITY_THRESHOLD",
    "TeacherDataset",
    "anchor_transform",
    "build_dataset",
    "build_object_map",
    "compose_descriptor",
    "embed_view",
    "feature_vector",
    "hypothesis_weights",
    "localize",
    "outlier_check",
    "similarity",
    "target_query",
]

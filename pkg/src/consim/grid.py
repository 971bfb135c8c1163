"""Grid geometry, planar poses, SE2 transforms, place classes and the sparse
dual-channel scored grid used as the object map.

Cell ``(ix, iy)`` covers ``[origin.x + ix*res, origin.x + (ix+1)*res)`` along x
(same for y).  Dense arrays derived from a grid are indexed ``[iy, ix]`` and
flat keys are ``iy * width + ix``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple, Tuple

import numpy as np

from . import _kernels

TWO_PI = 2.0 * math.pi

#: object map resolution in meters
MAP_RESOLUTION = 0.1
#: place-class bin sizes
PLACE_CELL_SIZE = 1.0
PLACE_SECTORS = 8
SECTOR_WIDTH = TWO_PI / PLACE_SECTORS

#: scores below this are treated as zero and evicted
EVICT_EPS = 1e-9


def normalize_angle(a: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    r = math.fmod(a + math.pi, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    r -= math.pi
    if r >= math.pi:
        r -= TWO_PI
    return r


@dataclass(frozen=True)
class GridSpec:
    resolution: float
    width: int
    height: int
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.resolution > 0.0) or not math.isfinite(self.resolution):
            raise ValueError(f"resolution must be positive, got {self.resolution!r}")
        if int(self.width) != self.width or self.width < 1:
            raise ValueError(f"width must be a positive integer, got {self.width!r}")
        if int(self.height) != self.height or self.height < 1:
            raise ValueError(f"height must be a positive integer, got {self.height!r}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def in_bounds(self, idx) -> bool:
        return 0 <= idx[0] < self.width and 0 <= idx[1] < self.height


class CellIndex(NamedTuple):
    ix: int
    iy: int


class PlaceClass(NamedTuple):
    """A 1 m x 1 m x 45 deg pose bin."""

    cx: int
    cy: int
    sector: int


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def position(self) -> Tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class SE2Transform:
    """Rigid planar motion: rotate by ``rot`` then translate by ``(tx, ty)``."""

    tx: float = 0.0
    ty: float = 0.0
    rot: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))
        object.__setattr__(self, "rot", normalize_angle(float(self.rot)))

    @classmethod
    def identity(cls) -> "SE2Transform":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_pose(cls, pose: Pose2D) -> "SE2Transform":
        return cls(pose.x, pose.y, pose.theta)

    def inverse(self) -> "SE2Transform":
        c, s = math.cos(self.rot), math.sin(self.rot)
        return SE2Transform(-(c * self.tx + s * self.ty), s * self.tx - c * self.ty, -self.rot)

    def __matmul__(self, other: "SE2Transform") -> "SE2Transform":
        return se2_compose(self, other)


def se2_compose(a: SE2Transform, b: SE2Transform) -> SE2Transform:
    """Return ``a o b``: applying the result equals applying ``b`` then ``a``."""
    c, s = math.cos(a.rot), math.sin(a.rot)
    return SE2Transform(
        c * b.tx - s * b.ty + a.tx,
        s * b.tx + c * b.ty + a.ty,
        a.rot + b.rot,
    )


def se2_inverse(t: SE2Transform) -> SE2Transform:
    return t.inverse()


def se2_apply(t: SE2Transform, point) -> Tuple[float, float]:
    c, s = math.cos(t.rot), math.sin(t.rot)
    x, y = point
    return (c * x - s * y + t.tx, s * x + c * y + t.ty)


def world_to_cell(point, spec: GridSpec) -> CellIndex:
    """Cell containing ``point``; the result may be out of bounds."""
    return CellIndex(
        math.floor((point[0] - spec.origin[0]) / spec.resolution),
        math.floor((point[1] - spec.origin[1]) / spec.resolution),
    )


def cell_to_world(idx, spec: GridSpec) -> Tuple[float, float]:
    """Center of cell ``idx``."""
    return (
        spec.origin[0] + (idx[0] + 0.5) * spec.resolution,
        spec.origin[1] + (idx[1] + 0.5) * spec.resolution,
    )


def pose_to_place_class(pose: Pose2D) -> PlaceClass:
    # sector 0 starts at -pi
    u = ((pose.theta + math.pi) % TWO_PI) / SECTOR_WIDTH
    sector = min(int(math.floor(u)), PLACE_SECTORS - 1)
    return PlaceClass(
        int(math.floor(pose.x / PLACE_CELL_SIZE)),
        int(math.floor(pose.y / PLACE_CELL_SIZE)),
        sector,
    )


def place_center_pose(place: PlaceClass) -> Pose2D:
    """Anchor pose of a place class: bin center in position and heading."""
    return Pose2D(
        (place.cx + 0.5) * PLACE_CELL_SIZE,
        (place.cy + 0.5) * PLACE_CELL_SIZE,
        -math.pi + (place.sector + 0.5) * SECTOR_WIDTH,
    )


def _pool(keys: np.ndarray, primary: np.ndarray, secondary: np.ndarray):
    """Collapse duplicate keys: max over primary, sum over secondary.

    Sums run in ascending value order per key so the result does not depend
    on the order contributions arrive in.
    """
    if keys.size == 0:
        return keys.astype(np.int64), primary.astype(np.float64), secondary.astype(np.float64)
    order = np.argsort(keys, kind="stable")
    return _kernels.pool_groups(
        np.ascontiguousarray(keys[order], dtype=np.int64),
        np.ascontiguousarray(primary[order], dtype=np.float64),
        np.ascontiguousarray(secondary[order], dtype=np.float64),
    )


class ScoredGrid:
    """Sparse map ``CellIndex -> (primary, secondary)``.

    Immutable.  Only entries with a nonzero channel are stored, keyed by flat
    index in ascending order.
    """

    __slots__ = ("spec", "keys", "primary", "secondary")

    def __init__(self, spec: GridSpec, keys=None, primary=None, secondary=None, *, _trusted=False):
        self.spec = spec
        if keys is None:
            keys = np.zeros(0, np.int64)
            primary = np.zeros(0)
            secondary = np.zeros(0)
        keys = np.asarray(keys, dtype=np.int64)
        primary = np.asarray(primary, dtype=np.float64)
        secondary = np.asarray(secondary, dtype=np.float64)
        if not _trusted:
            if not (keys.shape == primary.shape == secondary.shape) or keys.ndim != 1:
                raise ValueError("keys, primary and secondary must be 1-D arrays of equal length")
            if keys.size and (keys.min() < 0 or keys.max() >= spec.n_cells):
                raise ValueError("cell index out of bounds")
            if np.any(~np.isfinite(primary)) or np.any(~np.isfinite(secondary)):
                raise ValueError("scores must be finite")
            if np.any(primary < 0.0) or np.any(primary > 1.0):
                raise ValueError("primary scores must lie in [0, 1]")
            if np.any(secondary < 0.0):
                raise ValueError("secondary scores must be non-negative")
            keys, primary, secondary = _pool(keys, primary, secondary)
        primary = np.where(primary < EVICT_EPS, 0.0, primary)
        secondary = np.where(secondary < EVICT_EPS, 0.0, secondary)
        keep = (primary > 0.0) | (secondary > 0.0)
        if not keep.all():
            keys, primary, secondary = keys[keep], primary[keep], secondary[keep]
        for a in (keys, primary, secondary):
            a.flags.writeable = False
        self.keys = keys
        self.primary = primary
        self.secondary = secondary

    @classmethod
    def empty(cls, spec: GridSpec) -> "ScoredGrid":
        return cls(spec)

    @classmethod
    def from_cells(cls, spec: GridSpec, cells: Mapping) -> "ScoredGrid":
        """Build from ``{(ix, iy): (primary, secondary)}``."""
        items = list(cells.items())
        for (ix, iy), _ in items:
            if not spec.in_bounds((ix, iy)):
                raise ValueError(f"cell {(ix, iy)} out of bounds")
        keys = np.array([iy * spec.width + ix for (ix, iy), _ in items], dtype=np.int64)
        p = np.array([v[0] for _, v in items], dtype=np.float64)
        s = np.array([v[1] for _, v in items], dtype=np.float64)
        return cls(spec, keys, p, s)

    @classmethod
    def from_dense(cls, spec: GridSpec, primary: np.ndarray, secondary: np.ndarray) -> "ScoredGrid":
        p = np.asarray(primary, dtype=np.float64).ravel()
        s = np.asarray(secondary, dtype=np.float64).ravel()
        keys = np.flatnonzero((p >= EVICT_EPS) | (s >= EVICT_EPS))
        return cls(spec, keys, p[keys], s[keys], _trusted=True)

    def to_dense(self) -> Tuple[np.ndarray, np.ndarray]:
        p = np.zeros(self.spec.n_cells)
        s = np.zeros(self.spec.n_cells)
        p[self.keys] = self.primary
        s[self.keys] = self.secondary
        shape = (self.spec.height, self.spec.width)
        return p.reshape(shape), s.reshape(shape)

    @property
    def ix(self) -> np.ndarray:
        return self.keys % self.spec.width

    @property
    def iy(self) -> np.ndarray:
        return self.keys // self.spec.width

    @property
    def cells(self) -> dict:
        w = self.spec.width
        return {
            CellIndex(int(k % w), int(k // w)): (float(p), float(s))
            for k, p, s in zip(self.keys, self.primary, self.secondary)
        }

    def get(self, idx, default=(0.0, 0.0)):
        if not self.spec.in_bounds(idx):
            return default
        k = idx[1] * self.spec.width + idx[0]
        pos = np.searchsorted(self.keys, k)
        if pos < self.keys.size and self.keys[pos] == k:
            return (float(self.primary[pos]), float(self.secondary[pos]))
        return default

    def __getitem__(self, idx):
        v = self.get(idx, None)
        if v is None:
            raise KeyError(idx)
        return v

    def __contains__(self, idx) -> bool:
        return self.get(idx, None) is not None

    def __len__(self) -> int:
        return int(self.keys.size)

    def __iter__(self) -> Iterator[CellIndex]:
        w = self.spec.width
        return (CellIndex(int(k % w), int(k // w)) for k in self.keys)

    def items(self):
        return self.cells.items()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoredGrid):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.primary, other.primary)
            and np.array_equal(self.secondary, other.secondary)
        )

    def __repr__(self) -> str:
        return f"ScoredGrid({self.spec.width}x{self.spec.height}, {len(self)} cells)"

    def max_primary(self) -> float:
        return float(self.primary.max()) if self.keys.size else 0.0


def pooled_union(spec: GridSpec, grids: Iterable[ScoredGrid]) -> ScoredGrid:
    """Cell-wise max/sum fold of grids sharing one spec."""
    grids = list(grids)
    for g in grids:
        if g.spec != spec:
            raise ValueError("grids must share a spec")
    if not grids:
        return ScoredGrid.empty(spec)
    keys = np.concatenate([g.keys for g in grids])
    p = np.concatenate([g.primary for g in grids])
    s = np.concatenate([g.secondary for g in grids])
    k, p, s = _pool(keys, p, s)
    return ScoredGrid(spec, k, p, s, _trusted=True)


def transform_grid(g: ScoredGrid, t: SE2Transform, target_spec: GridSpec) -> ScoredGrid:
    """Resample ``g`` into ``target_spec`` after moving every cell center by ``t``.

    Each source cell lands in the target cell containing its mapped center;
    collisions keep the max primary and the sum of secondaries.  Cells that
    leave the target bounds are dropped.
    """
    if len(g) == 0:
        return ScoredGrid.empty(target_spec)
    src = g.spec
    x = src.origin[0] + (g.ix + 0.5) * src.resolution
    y = src.origin[1] + (g.iy + 0.5) * src.resolution
    c, s = math.cos(t.rot), math.sin(t.rot)
    wx = c * x - s * y + t.tx
    wy = s * x + c * y + t.ty
    tix = np.floor((wx - target_spec.origin[0]) / target_spec.resolution).astype(np.int64)
    tiy = np.floor((wy - target_spec.origin[1]) / target_spec.resolution).astype(np.int64)
    ok = (tix >= 0) & (tix < target_spec.width) & (tiy >= 0) & (tiy < target_spec.height)
    keys = tiy[ok] * target_spec.width + tix[ok]
    k, p, sec = _pool(keys, g.primary[ok], g.secondary[ok])
    return ScoredGrid(target_spec, k, p, sec, _trusted=True)


__all__ = [
    "CellIndex",
    "GridSpec",
    "MAP_RESOLUTION",
    "PlaceClass",
    "Pose2D",
    "SE2Transform",
    "ScoredGrid",
    "cell_to_world",
    "normalize_angle",
    "place_center_pose",
    "pooled_union",
    "pose_to_place_class",
    "se2_apply",
    "se2_compose",
    "se2_inverse",
    "transform_grid",
    "world_to_cell",
]

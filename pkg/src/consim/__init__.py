"""Grid-world object-goal navigation with query-built object maps shared
between agents over a compact wire protocol."""

from .grid import (
    CellIndex,
    GridSpec,
    PlaceClass,
    Pose2D,
    SE2Transform,
    ScoredGrid,
    pose_to_place_class,
    transform_grid,
)
from .harness import EpisodeResult, ExperimentConfig, ScenarioConfig, compute_spl, run_episode, run_experiment
from .world import FovModel, World, WorldParams, generate_world

__version__ = "0.1.0"

__all__ = [
    "CellIndex",
    "EpisodeResult",
    "ExperimentConfig",
    "FovModel",
    "GridSpec",
    "PlaceClass",
    "Pose2D",
    "SE2Transform",
    "ScenarioConfig",
    "ScoredGrid",
    "World",
    "WorldParams",
    "compute_spl",
    "generate_world",
    "pose_to_place_class",
    "run_episode",
    "run_experiment",
    "transform_grid",
]

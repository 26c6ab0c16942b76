"""Synthetic driving world: tracks, vehicle, expert, rasterizer, datasets."""

from .config import EnvConfig
from .data import (
    EpisodeIndex,
    Row,
    generate_dataset,
    load_frame,
    load_manifest,
    save_frame,
    split_for_episode,
)
from .geometry import Segment, Track, generate_track, project
from .raster import render
from .vehicle import (
    ControlSignal,
    EgoState,
    ExpertController,
    OffCorridorError,
    StepInfo,
    VisionActionPair,
    step,
    wrap_angle,
)

__all__ = [
    "ControlSignal",
    "EgoState",
    "EnvConfig",
    "EpisodeIndex",
    "ExpertController",
    "OffCorridorError",
    "Row",
    "Segment",
    "StepInfo",
    "Track",
    "VisionActionPair",
    "generate_dataset",
    "generate_track",
    "load_frame",
    "load_manifest",
    "project",
    "render",
    "save_frame",
    "split_for_episode",
    "step",
    "wrap_angle",
]

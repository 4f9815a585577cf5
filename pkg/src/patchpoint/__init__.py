"""Grounding-token pointing: coarse-to-fine codec, scoring heads, constrained decoder."""

from .geometry import (
    GridSpec,
    PixelPoint,
    PointTriple,
    build_grid,
    decode_triple,
    encode_point,
    frame_of_token,
    token_coordinate_map,
)
from .heads import GroundingParams, ImageContext, prefill_cache, rotary_rotate
from .targets import (
    LossBreakdown,
    PointAnnotation,
    SupervisionStep,
    build_targets,
    combine_losses,
    grounding_step_loss,
    sort_points,
    teacher_force_select,
)
from .decoder import DecodeState, decode, parse_points, serialize_points
from .backbone import SyntheticImage, ToyModelConfig, ToyPointModel
from .metrics import MatchConfig, MetricsReport, count_metrics, point_prf, render_overlay
from .harness import TaskConfig, TrainConfig, Trainer, gen_example, sweep, train

__all__ = [
    "GridSpec", "PixelPoint", "PointTriple", "build_grid", "encode_point",
    "decode_triple", "frame_of_token", "token_coordinate_map",
    "GroundingParams", "ImageContext", "prefill_cache", "rotary_rotate",
    "SupervisionStep", "PointAnnotation", "LossBreakdown", "sort_points",
    "build_targets", "grounding_step_loss", "combine_losses", "teacher_force_select",
    "DecodeState", "serialize_points", "parse_points", "decode",
    "SyntheticImage", "ToyModelConfig", "ToyPointModel",
    "MatchConfig", "MetricsReport", "point_prf", "count_metrics", "render_overlay",
    "TaskConfig", "TrainConfig", "Trainer", "gen_example", "train", "sweep",
]

__version__ = "0.1.0"

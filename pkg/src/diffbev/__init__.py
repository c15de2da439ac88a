"""Differentiable 2D rigid-body physics in bird's-eye view, parameter identification and program execution."""

__version__ = "0.1.0"

from diffbev.scene import (  # noqa: E402
    Body, BodyParams, BodyState, GlobalPhysics, SceneConfig, ShapeKind, Trajectory, Visibility, Wall,
    validate_scene,
)
from diffbev.dynamics import simulate, simulate_full  # noqa: E402
from diffbev.events import Event, EventKind, EventLog, build_causal_graph, extract_events  # noqa: E402
from diffbev.identification import FitReport, FitSchedule, Globals, fit_global, identify  # noqa: E402
from diffbev.executor import execute_program  # noqa: E402
from diffbev.projection import CameraMatrix, calibrate_camera, image_to_bev  # noqa: E402

__all__ = [
    "Body", "BodyParams", "BodyState", "GlobalPhysics", "SceneConfig", "ShapeKind", "Trajectory", "Visibility",
    "Wall", "validate_scene", "simulate", "simulate_full", "Event", "EventKind", "EventLog", "build_causal_graph",
    "extract_events", "FitReport", "FitSchedule", "Globals", "fit_global", "identify", "execute_program",
    "CameraMatrix", "calibrate_camera", "image_to_bev",
]

"""Interactive neural scene labelling.

Sessions hold keyframes, sparse clicks and the field being optimised. The
synthetic scenes ("toy", "desk" or a scene JSON path) give ground truth for
simulated sessions.
"""

from ._core import (
    ScenelabelError,
    Session,
    extract_mesh,
    miou,
    render_scene,
    run_session,
    scene_info,
    session_from_scene,
)

__all__ = [
    "ScenelabelError",
    "Session",
    "extract_mesh",
    "miou",
    "render_scene",
    "run_session",
    "scene_info",
    "session_from_scene",
]

"""Semantic mapping of corn rows from side, front and back camera observations."""

from .errors import RowSlamError
from .geometry import CameraIntrinsics, Plane, RigidTransform
from .mapping import SemanticMap, StalkLandmark
from .pipeline import RunConfig, run_pipeline
from .simulator import GroundTruth, ObservationLog, SimulationSpec, read_log, simulate, write_log

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "GroundTruth",
    "ObservationLog",
    "Plane",
    "RigidTransform",
    "RowSlamError",
    "RunConfig",
    "SemanticMap",
    "SimulationSpec",
    "StalkLandmark",
    "read_log",
    "run_pipeline",
    "simulate",
    "write_log",
]

"""Batched soft-tissue surgical simulator with a PPO reach-task trainer."""

from .backends import available_backends, default_backend_name
from .env import EnvBatch, EnvConfig
from .errors import CheckpointError, ParseError, SimulationDiverged, ValidationError
from .mesh import SceneConfig, TetMesh, load_scene
from .solver import Simulation

__version__ = "0.1.0"

__all__ = [
    "available_backends",
    "default_backend_name",
    "EnvBatch",
    "EnvConfig",
    "CheckpointError",
    "ParseError",
    "SimulationDiverged",
    "ValidationError",
    "SceneConfig",
    "TetMesh",
    "load_scene",
    "Simulation",
    "__version__",
]

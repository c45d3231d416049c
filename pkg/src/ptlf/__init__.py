"""Self-supervised continual learning with progressive task-correlated layer freezing."""

from .config import DatasetSpec, RunConfig, load_config, parse_config, serialize_config
from .continual import ReplayBuffer, run_stream, train_task
from .freezing import FreezeMode, FreezeSchedule, Selection
from .network import Network

__all__ = [
    "DatasetSpec",
    "FreezeMode",
    "FreezeSchedule",
    "Network",
    "ReplayBuffer",
    "RunConfig",
    "Selection",
    "load_config",
    "parse_config",
    "run_stream",
    "serialize_config",
    "train_task",
]

__version__ = "0.1.0"

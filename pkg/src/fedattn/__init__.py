"""Deterministic simulator and analysis toolkit for federated attention."""

from .errors import (ConfigError, DegenerateRowError, FedAttnError, PartitionError,
                     ScheduleError, ShapeError)
from .model import ModelConfig, ModelWeights, embed_tokens, init_weights
from .oracle import run_cenattn, run_locattn
from .partition import Partition, gen_corpus, make_partition
from .protocol import (FedOptions, RunTrace, SyncSchedule, decode_greedy, named_schedule,
                       run_fedattn, uniform_schedule)

__all__ = [
    "ConfigError", "DegenerateRowError", "FedAttnError", "FedOptions", "ModelConfig",
    "ModelWeights", "Partition", "PartitionError", "RunTrace", "ScheduleError", "ShapeError",
    "SyncSchedule", "decode_greedy", "embed_tokens", "gen_corpus", "init_weights",
    "make_partition", "named_schedule", "run_cenattn", "run_fedattn", "run_locattn",
    "uniform_schedule",
]
__version__ = "0.1.0"

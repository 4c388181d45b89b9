"""
htsc: hierarchical training with a front-door causal decoder for report
generation, on a synthetic image/report corpus.
"""

from typing import Final, List, Literal

__version__: Final[Literal["0.1.0"]] = "0.1.0"

from .data.corpus import Batch, Corpus
from .models.model import HTSCModel
from .training.checkpoint import Checkpoint
from .training.config import Config, ConfigBuilder
from .training.generation import generate, load_model
from .training.trainer import stage1_train, stage2_train
from .utils.errors import HTSCError

__all__: Final[List[str]] = [
    "Batch",
    "Checkpoint",
    "Config",
    "ConfigBuilder",
    "Corpus",
    "HTSCError",
    "HTSCModel",
    "generate",
    "load_model",
    "stage1_train",
    "stage2_train",
]

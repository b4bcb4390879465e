"""ctrank: cascade transformer ranking with in-batch candidate pruning."""

from .cascade import CascadeConfig, CascadeModel, monolithic_model
from .encoder import EncoderConfig
from .kernels import BACKEND as kernel_backend
from .ranker import DropSchedule, cascade_infer, monolithic_rank, sequential_rerank

__version__ = "0.1.0"

__all__ = [
    "CascadeConfig",
    "CascadeModel",
    "DropSchedule",
    "EncoderConfig",
    "cascade_infer",
    "kernel_backend",
    "monolithic_model",
    "monolithic_rank",
    "sequential_rerank",
    "__version__",
]

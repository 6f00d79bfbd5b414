"""Quantum test-time training on a dense state-vector simulator."""

from .circuits import ArchitectureConfig, NoiseSpec, QtttParams, realize_noise
from .data import CorruptionSpec, Dataset, corrupt, generate
from .model import LossBreakdown, predict, qae_loss, total_loss
from .statevec import GateOp, ReducedDensity, StateVector
from .train import TrainConfig, TttConfig, fit, ttt_batch, ttt_online

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "CorruptionSpec",
    "Dataset",
    "GateOp",
    "LossBreakdown",
    "NoiseSpec",
    "QtttParams",
    "ReducedDensity",
    "StateVector",
    "TrainConfig",
    "TttConfig",
    "corrupt",
    "fit",
    "generate",
    "predict",
    "qae_loss",
    "realize_noise",
    "total_loss",
    "ttt_batch",
    "ttt_online",
]

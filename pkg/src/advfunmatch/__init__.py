"""Adversarial function matching: robustness distillation over L-inf balls.

A small, framework-free engine: float64 tape autodiff, compact networks,
worst-case ("mismatched") example search with teacher-gradient guidance,
a distillation trainer, attack evaluation, and verification oracles.
"""

from .autograd import ConfigError, ShapeError, Tape, TapeError, Tensor, pause_tape
from .data import Dataset
from .nn import FormatError, Network, build
from .worst_case import WorstCaseResult, WorstCaseSpec, generate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Dataset",
    "FormatError",
    "Network",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "WorstCaseResult",
    "WorstCaseSpec",
    "build",
    "generate",
    "pause_tape",
    "__version__",
]

"""Desk-scale visual representation learning.

The package builds image embedding models on a small hand-rolled autodiff
core: three backbone families, multitask and triplet training, brute-force
retrieval evaluation, and attention probing, all runnable on a CPU in
minutes.
"""

from .errors import (
    CapabilityError,
    ConfigError,
    ContractError,
    FormatError,
    LabelError,
    NumericalAbort,
    ParseError,
    ShapeError,
    TruncatedError,
    VisRepError,
)
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "VisRepError",
    "ShapeError",
    "ConfigError",
    "ContractError",
    "LabelError",
    "FormatError",
    "TruncatedError",
    "ParseError",
    "CapabilityError",
    "NumericalAbort",
    "__version__",
]

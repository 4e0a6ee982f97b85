"""Truncated inexact Newton solver for parameter-dependent equations."""

from .core import (EUCLIDEAN, LowRankMatrixFamily, LowRankVectorFamily, NormSpec,
                   OracleLedger, SampleSet, SparsityPattern, add_families, evaluate_vector,
                   global_norm)
from .truncation import Truncator, truncate

__version__ = "0.1.0"

__all__ = [
    "EUCLIDEAN", "LowRankMatrixFamily", "LowRankVectorFamily", "NormSpec", "OracleLedger",
    "SampleSet", "SparsityPattern", "Truncator", "add_families", "evaluate_vector",
    "global_norm", "truncate",
]

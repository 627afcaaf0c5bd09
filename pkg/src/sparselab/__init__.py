"""Learned sparse retrieval at desk scale: impact indexes, safe top-k
retrieval, a toy SPLADE-style encoder with sparsity-regularized
distillation, fusion, evaluation and latency measurement."""

from .errors import ContractViolation, FormatError, IndexBuildError, SparselabError, TrainingDiverged
from .sparse import SparseVector, Vocabulary, densify, dot, nnz

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "FormatError",
    "IndexBuildError",
    "SparselabError",
    "SparseVector",
    "TrainingDiverged",
    "Vocabulary",
    "densify",
    "dot",
    "nnz",
    "__version__",
]

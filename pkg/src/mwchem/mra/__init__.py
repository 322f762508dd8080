"""Adaptive multiwavelet function representation on [-L, L]^d."""

from .basis import MultiwaveletBasis
from .tree import (
    FunctionTree,
    MRAConfig,
    NodeKey,
    add,
    apply_laplacian_expectation,
    evaluate,
    inner,
    linear_combination,
    multiply,
    project,
)

__all__ = [
    "MultiwaveletBasis",
    "FunctionTree",
    "MRAConfig",
    "NodeKey",
    "add",
    "apply_laplacian_expectation",
    "evaluate",
    "inner",
    "linear_combination",
    "multiply",
    "project",
]

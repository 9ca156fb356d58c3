"""Differentiable search over relational graph operations.

A desk-scale library for searching per-sample computation structures over
a set of graph operations (feature aggregation, difference propagation,
temporal convolution, background incorporation, node attention) with a
softmax relaxation, a diversity regularizer, and discrete derivation.
"""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: F401

"""Reverse-mode autodiff: engine, primitive ops, finite-difference checks."""

from .engine import (
    GraphError,
    Node,
    Tensor,
    as_tensor,
    constant,
    default_dtype,
    set_default_dtype,
    using_dtype,
)
from .gradcheck import GradReport, grad_check, primitive_cases, run_cases
from .ops import OP_TABLE, ShapeError, apply

__all__ = [
    "GraphError",
    "Node",
    "Tensor",
    "as_tensor",
    "constant",
    "default_dtype",
    "set_default_dtype",
    "using_dtype",
    "GradReport",
    "grad_check",
    "primitive_cases",
    "run_cases",
    "OP_TABLE",
    "ShapeError",
    "apply",
]

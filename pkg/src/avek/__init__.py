"""Averaged Kaczmarz and related iterations for systems of ill-posed operator equations."""

from .opsys import (BlockSystem, LinearBlock, MatrixBlock, NonlinearBlock, Space,
                    estimate_norm, gradient_step_direction, rescale_system, residual)
from .solvers import Method, RunResult, SolverConfig, run

__version__ = "0.1.0"

__all__ = [
    "BlockSystem",
    "LinearBlock",
    "MatrixBlock",
    "NonlinearBlock",
    "Space",
    "estimate_norm",
    "gradient_step_direction",
    "rescale_system",
    "residual",
    "Method",
    "RunResult",
    "SolverConfig",
    "run",
]

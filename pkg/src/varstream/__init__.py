"""Planar convex variational problems with radial energy densities:
smoothed minimization, stream-function construction, critical-point index
machinery, and residuals of the associated degenerate elliptic equations."""

from . import cli, critical, grid, lagrangian, minimize, pde, reference, stream

__all__ = [
    "cli",
    "critical",
    "grid",
    "lagrangian",
    "minimize",
    "pde",
    "reference",
    "stream",
]

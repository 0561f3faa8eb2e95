"""Closed-form ground-truth fields.

The centrepiece is the two-branch disk solution whose gradient vanishes
exactly on the vertical segment through the origin: a C^{1,1} distributional
solution of the case-study divergence-form equation on every disk of radius
R < 1.  Synthetic Morse fields calibrate the index machinery.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "ReferenceSolution",
    "OutsideDomainError",
    "remark_solution",
    "morse_fields",
]


class OutsideDomainError(ValueError):
    """Evaluation requested at |z| >= 1 where the closed form is undefined."""


@dataclass(frozen=True)
class ReferenceSolution:
    """Closed-form solution on a disk of radius R < 1 with analytic
    gradient.  Both branches vanish on {x = 0}; the gradient there is the
    (exact) limit (0, 0)."""

    R: float
    eval: Callable
    grad: Callable


def _core(x, y):
    """Shared radicals: t = 1 - |z|^2, D = sqrt(t^2 + 4 y^2), W = (t+D)/2."""
    t = 1.0 - x * x - y * y
    D = np.sqrt(t * t + 4.0 * y * y)
    W = 0.5 * (t + D)
    return D, W


def remark_solution(R: float) -> ReferenceSolution:
    """Two-branch field  sign(x) * (1 - sqrt(W(x, y)))  on the unit disk.

    W collapses to 1 on the axis {x = 0} (the nested radical is a perfect
    square there), so the field is continuous with gradient exactly zero on
    the segment.  Derivatives below are the symbolic ones of each branch:

        u_x = |x| sqrt(W) / D,    u_y = sign(x) * y (W - 1) / (D sqrt(W)).
    """
    if not 0.0 < R < 1.0:
        raise ValueError("R must lie in (0, 1)")

    def _check(x, y):
        if np.any(np.asarray(x) ** 2 + np.asarray(y) ** 2 >= 1.0):
            raise OutsideDomainError("point outside the open unit disk")

    def eval_(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        _check(x, y)
        _, W = _core(x, y)
        return np.where(x >= 0, 1.0, -1.0) * (1.0 - np.sqrt(W))

    def grad(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        _check(x, y)
        D, W = _core(x, y)
        sqW = np.sqrt(W)
        on_axis = x == 0
        ux = np.where(on_axis, 0.0, np.abs(x) * sqW / D)
        sgn = np.where(x >= 0, 1.0, -1.0)
        uy = np.where(on_axis, 0.0, sgn * y * (W - 1.0) / (D * sqW))
        return ux, uy

    return ReferenceSolution(R=R, eval=eval_, grad=grad)


def morse_fields() -> list[tuple[str, Callable, int]]:
    """Synthetic fields with a single critical point of known index at the
    origin: extremum (+1), saddle (-1), monkey saddle (-2)."""
    return [
        ("extremum", lambda x, y: x * x + y * y, 1),
        ("saddle", lambda x, y: x * x - y * y, -1),
        ("monkey-saddle", lambda x, y: x**3 - 3 * x * y * y, -2),
    ]

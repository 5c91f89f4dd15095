"""Collision constraint function shared by the optimizer and the risk estimators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


@dataclass(frozen=True)
class ConstraintSpec:
    """Collision constraint ``c(p, Y) = min_j ||p - Y_j|| - (r_r + r_o + r_s)``.

    ``lipschitz`` is the constant of ``c`` in its second argument with respect to
    the Euclidean norm on the stacked obstacle vector. For the min-distance form
    above it is exactly 1: ``|c(p, Y) - c(p, Y')| <= max_j ||Y_j - Y'_j|| <= ||Y - Y'||``.
    """

    r_robot: float = 0.2
    r_obstacle: float = 0.2
    r_safety: float = 0.1
    lipschitz: float = 1.0
    norm: str = "stacked-euclidean"

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidInput("total collision radius must be positive")
        if self.lipschitz <= 0:
            raise InvalidInput("lipschitz constant must be positive")

    @property
    def radius(self) -> float:
        return float(self.r_robot + self.r_obstacle + self.r_safety)


def constraint_margin(spec: ConstraintSpec, ego_pos, joint_obs) -> float | np.ndarray:
    """Signed clearance between the ego position and the closest obstacle.

    ``joint_obs`` is a stacked vector ``(Y_1x, Y_1y, ..., Y_Mx, Y_My)`` or an
    array whose trailing axis is that vector; leading axes broadcast and the
    result has the leading shape. Negative values mean a collision.
    """
    p = np.asarray(ego_pos, dtype=float)
    obs = np.asarray(joint_obs, dtype=float)
    if p.shape[-1] != 2 or obs.shape[-1] % 2:
        raise InvalidInput("ego position must be 2-D and obstacles stacked (x, y) pairs")
    obs = obs.reshape(obs.shape[:-1] + (-1, 2))
    if obs.shape[-2] == 0:
        out = np.full(np.broadcast_shapes(obs.shape[:-2], p.shape[:-1]), np.inf)
        return float(out) if out.ndim == 0 else out
    d = np.linalg.norm(obs - p[..., None, :], axis=-1)
    out = d.min(axis=-1) - spec.radius
    return float(out) if np.ndim(out) == 0 else out

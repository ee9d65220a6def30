"""Zeroth-order gradient estimation and learning-rate schedules.

The estimator is the centered-difference form: draw directions u_i from a
standard normal, probe the loss at v ± mu*u_i, and average the directional
slopes back along each u_i. 2N loss evaluations, no reverse-mode anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import NumericError


def sample_direction(dim: int, seed: int, index: int) -> np.ndarray:
    """The index-th probe direction for a seed: i.i.d. standard normal.
    Deterministic and addressable: (seed, index) fully determines u."""
    return np.random.default_rng([seed, index]).standard_normal(dim)


def zo_gradient(
    loss_fn: Callable[[np.ndarray], float],
    v: np.ndarray,
    mu: float,
    n_directions: int,
    rng_seed: int,
) -> np.ndarray:
    """Centered-difference gradient estimate at v.

    Exactly 2*n_directions loss evaluations, reduced in fixed direction
    order. The estimate lives in span{u_1..u_N} by construction.
    """
    if not (mu > 0):
        raise ValueError(f"mu must be positive, got {mu}")
    v = np.asarray(v, dtype=np.float64)
    grad = np.zeros_like(v)
    for i in range(n_directions):
        u = sample_direction(v.shape[0], rng_seed, i)
        lp = float(loss_fn(v + mu * u))
        lm = float(loss_fn(v - mu * u))
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise NumericError(f"non-finite loss on probe direction {i}")
        grad += ((lp - lm) / (2.0 * mu)) * u
    grad /= n_directions
    return grad


@dataclass(frozen=True)
class StaticLR:
    lr: float

    def at(self, step: int, max_steps: int) -> float:
        return self.lr


@dataclass(frozen=True)
class CosineLR:
    """Cosine annealing from lr_max down to lr_min over `horizon` steps
    (defaults to the optimizer's max_steps)."""

    lr_max: float
    lr_min: float = 0.0
    horizon: Union[int, None] = None

    def at(self, step: int, max_steps: int) -> float:
        horizon = self.horizon if self.horizon is not None else max_steps
        t = min(max(step - 1, 0), horizon) / max(horizon, 1)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * t))


Schedule = Union[StaticLR, CosineLR]


def schedule_to_dict(s: Schedule) -> dict:
    if isinstance(s, StaticLR):
        return {"kind": "static", "lr": s.lr}
    return {"kind": "cosine", "lr_max": s.lr_max, "lr_min": s.lr_min, "horizon": s.horizon}


def schedule_from_dict(d: dict) -> Schedule:
    if d["kind"] == "static":
        return StaticLR(lr=d["lr"])
    if d["kind"] == "cosine":
        return CosineLR(lr_max=d["lr_max"], lr_min=d.get("lr_min", 0.0), horizon=d.get("horizon"))
    raise ValueError(f"unknown schedule kind {d['kind']!r}")

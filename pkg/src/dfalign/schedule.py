"""Coefficient schedule for the residual diffusion process.

The schedule is a strictly increasing sequence gamma_1..gamma_T in (0, 1]
with gamma_1 = gamma_min and gamma_T = 1 exactly, plus the convention
gamma_0 = 0.  Derived quantities:

    alpha_t  = gamma_t - gamma_{t-1}            (positive increments, sum 1)
    lambda_t = sqrt((gamma_{t-1}/gamma_t) * alpha_t) * sigma

lambda_1 is 0 because gamma_0 = 0, which makes the final reverse update
deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

SCHEDULE_SHAPES = ("linear", "geometric")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Immutable schedule; freely shareable across threads."""

    steps: int
    gamma: np.ndarray  # shape (steps,), strictly increasing, gamma[-1] == 1
    sigma: float
    shape: str = "linear"

    def gamma_at(self, t: int) -> float:
        """gamma_t with the gamma_0 = 0 convention; valid for 0 <= t <= T."""
        if not 0 <= t <= self.steps:
            raise IndexError(f"timestep {t} outside [0, {self.steps}]")
        return 0.0 if t == 0 else float(self.gamma[t - 1])

    def alpha(self, t: int) -> float:
        if not 1 <= t <= self.steps:
            raise IndexError(f"timestep {t} outside [1, {self.steps}]")
        return self.gamma_at(t) - self.gamma_at(t - 1)

    def lambda_t(self, t: int) -> float:
        if not 1 <= t <= self.steps:
            raise IndexError(f"timestep {t} outside [1, {self.steps}]")
        ratio = self.gamma_at(t - 1) / self.gamma_at(t)
        return math.sqrt(ratio * self.alpha(t)) * self.sigma


def make_schedule(steps: int, gamma_min: float = 0.01, sigma: float = 0.05,
                  shape: str = "linear") -> DiffusionSchedule:
    """Build a schedule running from gamma_min up to exactly 1.

    ``linear`` spaces the coefficients evenly; ``geometric`` spaces them
    evenly in log domain.  steps == 1 degenerates to gamma = [1.0].
    """
    if not isinstance(steps, int) or steps < 1:
        raise ParameterError(f"steps must be a positive integer, got {steps!r}")
    if not 0.0 < gamma_min < 1.0:
        raise ParameterError(f"gamma_min must lie in (0, 1), got {gamma_min!r}")
    if sigma < 0.0:
        raise ParameterError(f"sigma must be nonnegative, got {sigma!r}")
    if shape not in SCHEDULE_SHAPES:
        raise ParameterError(f"unknown schedule shape {shape!r}")

    if steps == 1:
        gamma = np.array([1.0])
    elif shape == "linear":
        gamma = gamma_min + (1.0 - gamma_min) * np.arange(steps) / (steps - 1)
    else:
        exponents = (steps - 1 - np.arange(steps)) / (steps - 1)
        gamma = gamma_min ** exponents
    gamma = np.asarray(gamma, dtype=np.float64)
    gamma[-1] = 1.0
    gamma.setflags(write=False)

    if np.any(np.diff(gamma) <= 0.0):
        raise ParameterError("schedule is not strictly increasing")
    return DiffusionSchedule(steps=steps, gamma=gamma, sigma=float(sigma), shape=shape)

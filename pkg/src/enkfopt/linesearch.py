"""Step-size rules: gradient-free Armijo backtracking and the 1/j schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ScheduleError


@dataclass(frozen=True)
class ArmijoParams:
    c: float = 1e-4
    shrink: float = 0.5
    max_trials: int = 20
    mu0: float = 1.0
    # next initial step = growth * last accepted step
    growth: float = 2.0

    def __post_init__(self):
        if not (0 < self.shrink < 1):
            raise ConfigError("shrink must lie in (0, 1)")
        if self.c < 0 or self.max_trials < 1 or self.mu0 <= 0 or self.growth < 1:
            raise ConfigError("invalid Armijo parameters")


@dataclass
class LineSearchResult:
    mu: float
    value: float
    trials: int
    null_step: bool


def armijo_line_search(phi, theta, d, mu0, params: ArmijoParams = ArmijoParams(), phi0=None):
    """Backtrack from ``mu0`` until ``phi(theta + mu d) <= phi0 - c mu ||d||^2``.

    ``||d||^2`` stands in for the unavailable ``-grad(phi)^T d``. Probes are
    ``mu0 * shrink**t`` for ``t = 0 .. max_trials - 1``; if none is accepted
    the result is a null step with ``mu = 0`` and ``value = phi0``. A probe
    returning ``+inf`` is rejected like any insufficient decrease; NaN raises.
    """
    theta = np.asarray(theta, dtype=float)
    d = np.asarray(d, dtype=float)
    if phi0 is None:
        phi0 = float(phi(theta))
    dd = float(d @ d)
    if dd == 0.0 or not np.isfinite(dd):
        return LineSearchResult(0.0, phi0, 0, True)
    if mu0 <= 0:
        raise ConfigError("mu0 must be positive")
    mu = float(mu0)
    for t in range(params.max_trials):
        value = float(phi(theta + mu * d))
        if np.isnan(value):
            raise NumericError(f"objective is NaN at line-search probe {t} (mu={mu:.3e})")
        if value <= phi0 - params.c * mu * dd:
            return LineSearchResult(mu, value, t + 1, False)
        mu *= params.shrink
    return LineSearchResult(0.0, phi0, params.max_trials, True)


def theoretical_step_size(j: int, L: float, k: int, sigma: float) -> float:
    """``mu_j = 1 / (j L k sigma^2)``, defined for ``j >= 1``."""
    if j < 1:
        raise ScheduleError(f"schedule starts at j=1, got j={j}")
    if L <= 0 or k <= 0 or sigma <= 0:
        raise ScheduleError("L, k and sigma must be positive")
    return 1.0 / (j * L * k * sigma**2)

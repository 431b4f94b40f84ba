"""Particle perturbation sampling.

Perturbations are drawn from a counter-based Philox stream so the drawn
matrix depends only on the seed and the number of previous draws, never on
how particle evaluations are later scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError

# stream ids used with make_stream; keeps mini-batch selection independent of Omega
PERTURBATION_STREAM = 0
BATCH_STREAM = 1
INIT_STREAM = 2


class Distribution(str, Enum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"


@dataclass(frozen=True)
class PerturbationSpec:
    """Shape, scale and law of the particle offsets.

    ``decay`` enables an optional geometric schedule sigma_j = sigma * decay**j;
    the default 1.0 keeps sigma fixed.
    """

    dimension: int
    particle_count: int
    sigma: float
    distribution: Distribution = Distribution.GAUSSIAN
    seed: int = 0
    decay: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution(self.distribution))
        validate_spec(self)

    def sigma_at(self, iteration: int) -> float:
        return self.sigma * self.decay**iteration


def validate_spec(spec: PerturbationSpec) -> None:
    if int(spec.dimension) < 1:
        raise ConfigError(f"dimension must be >= 1, got {spec.dimension}")
    if int(spec.particle_count) < 1:
        raise ConfigError(f"particle_count must be >= 1, got {spec.particle_count}")
    if not (np.isfinite(spec.sigma) and spec.sigma > 0):
        raise ConfigError(f"sigma must be a positive finite number, got {spec.sigma}")
    if not (0 < spec.decay <= 1):
        raise ConfigError(f"decay must lie in (0, 1], got {spec.decay}")
    if not (0 <= int(spec.seed) < 2**64):
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {spec.seed}")


def make_stream(seed: int, stream_id: int = PERTURBATION_STREAM) -> np.random.Generator:
    """Independent, reproducible Philox stream for ``(seed, stream_id)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))


def draw_perturbations(spec: PerturbationSpec, stream: np.random.Generator,
                       sigma: float | None = None) -> np.ndarray:
    """Draw an ``n x k`` matrix whose columns are i.i.d. particle offsets.

    Every entry has mean zero and variance ``sigma**2``. Each column is
    generated contiguously from the stream, so the first columns of a draw do
    not depend on ``k``.
    """
    validate_spec(spec)
    n, k = int(spec.dimension), int(spec.particle_count)
    s = spec.sigma if sigma is None else float(sigma)
    if spec.distribution is Distribution.GAUSSIAN:
        raw = stream.standard_normal((k, n))
    else:
        raw = 2.0 * stream.integers(0, 2, size=(k, n)).astype(float) - 1.0
    return np.ascontiguousarray((s * raw).T)


def empirical_moments(omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column mean and uncentered second moment ``(1/k) Omega Omega^T``."""
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    if omega.size == 0:
        raise ValueError("omega must be non-empty")
    k = omega.shape[1]
    return omega.mean(axis=1), omega @ omega.T / k


# statistical tolerances for pooled moments of `total` i.i.d. columns
MEAN_TOL_SIGMAS = 3.0
COV_TOL_SIGMAS = 5.0


def moment_tolerances(dimension: int, sigma: float, total: int) -> tuple[float, float]:
    """Bounds for the pooled empirical moments of ``total`` columns.

    The column mean has norm of order ``sigma * sqrt(n / total)`` and each
    second-moment entry a standard deviation of at most
    ``sqrt(2) * sigma**2 / sqrt(total)``. The returned bounds allow
    ``MEAN_TOL_SIGMAS`` and ``COV_TOL_SIGMAS`` times these scales for the
    mean norm and the largest covariance deviation respectively.
    """
    mean_tol = MEAN_TOL_SIGMAS * sigma * np.sqrt(dimension / total)
    cov_tol = COV_TOL_SIGMAS * sigma**2 / np.sqrt(total)
    return float(mean_tol), float(cov_tol)

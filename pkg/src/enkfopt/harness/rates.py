"""Empirical convergence-rate estimation from replicated traces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..errors import ConfigError
from .traces import read_trace


@dataclass(frozen=True)
class RateEstimate:
    slope: float
    half_width: float
    window: tuple
    n_points: int
    replicates: int

    def __str__(self):
        lo, hi = self.window
        return (f"slope {self.slope:.4f} +/- {self.half_width:.4f} over j in [{lo}, {hi}] "
                f"({self.replicates} replicates)")


def _distances(trace):
    """``(iter, dist_to_opt)`` arrays from a RunTrace, a column dict or a CSV path."""
    if hasattr(trace, "column"):
        return np.asarray(trace.column("iter"), float), np.asarray(trace.column("dist_to_opt"), float)
    if not isinstance(trace, dict):
        trace = read_trace(trace)
    if "dist_to_opt" not in trace:
        raise ConfigError("trace has no dist_to_opt column")
    return np.asarray(trace["iter"], float), np.asarray(trace["dist_to_opt"], float)


def mean_squared_distance(traces):
    """Average ``dist_to_opt**2`` over replicates on their common iteration prefix."""
    pairs = [_distances(t) for t in traces]
    if not pairs:
        raise ConfigError("no traces given")
    n = min(len(it) for it, _ in pairs)
    iters = pairs[0][0][:n]
    d2 = np.array([d[:n] ** 2 for _, d in pairs])
    if np.isnan(d2).all():
        raise ConfigError("traces carry no dist_to_opt values (unknown optimum)")
    return iters, d2.mean(axis=0)


def fit_loglog(j, y, confidence: float = 0.95):
    """OLS slope of ``log y`` against ``log j`` and its confidence half-width."""
    res = stats.linregress(np.log(j), np.log(y))
    df = len(j) - 2
    half = float(stats.t.ppf(0.5 + confidence / 2, df) * res.stderr) if df > 0 else float("inf")
    return float(res.slope), half


def estimate_rate(traces, burn_in: float = 0.1, window=None, confidence: float = 0.95) -> RateEstimate:
    """Slope of ``log E||theta_j - theta*||^2`` versus ``log j``.

    The first ``burn_in`` fraction of iterations is always excluded;
    ``window=(lo, hi)`` further restricts the fit to ``lo <= j <= hi``.
    """
    if not 0 <= burn_in < 1:
        raise ConfigError("burn_in must lie in [0, 1)")
    traces = list(traces)
    iters, msd = mean_squared_distance(traces)
    j_max = iters.max()
    lo = max(1.0, burn_in * j_max)
    hi = j_max
    if window is not None:
        lo, hi = max(lo, window[0]), min(hi, window[1])
    mask = (iters >= lo) & (iters <= hi) & np.isfinite(msd) & (msd > 0)
    if mask.sum() < 2:
        raise ConfigError(f"fit window [{lo}, {hi}] holds fewer than two usable points")
    slope, half = fit_loglog(iters[mask], msd[mask], confidence)
    used = iters[mask]
    return RateEstimate(slope, half, (int(used[0]), int(used[-1])), int(mask.sum()), len(traces))

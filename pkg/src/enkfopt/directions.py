"""Update directions built from a perturbation block and its forward differences.

All functions return the *unscaled* step ``d``; the caller multiplies by the
step size. ``omega`` is ``n x k'`` and ``q`` is ``m x k'`` where ``k'`` is the
number of particle columns in use (``k`` for the plain iteration, up to the
buffer capacity for the memory variant).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import IllConditionedError, ShapeError

GAMMA_SCALE = 1e-4
GAMMA_FLOOR = 1e-12
JITTER_RETRIES = 3


class CGConvergenceWarning(RuntimeWarning):
    pass


def _check_pair(omega, q, g=None):
    omega = np.asarray(omega, dtype=float)
    q = np.asarray(q, dtype=float)
    if omega.ndim != 2 or q.ndim != 2 or omega.shape[1] != q.shape[1]:
        raise ShapeError(f"omega {omega.shape} and q {q.shape} must have equal column counts")
    if g is not None:
        g = np.asarray(g, dtype=float)
        if g.shape != (q.shape[0],):
            raise ShapeError(f"gradient has shape {g.shape}, expected ({q.shape[0]},)")
    return omega, q, g


def default_gamma(q: np.ndarray) -> float:
    """Scale-adaptive regularization ``1e-4 * trace(Q^T Q) / k'``."""
    q = np.asarray(q, dtype=float)
    gamma = GAMMA_SCALE * float(np.sum(q * q)) / max(q.shape[1], 1)
    return max(gamma, GAMMA_FLOOR)


def direction_identity(omega, q, g) -> np.ndarray:
    """``d = -Omega Q^T g``."""
    omega, q, g = _check_pair(omega, q, g)
    return -(omega @ (q.T @ g))


def _as_matrix(gamma, size):
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 0:
        return float(gamma) * np.eye(size)
    if gamma.ndim == 1:
        return np.diag(gamma)
    if gamma.shape != (size, size):
        raise ShapeError(f"Gamma has shape {gamma.shape}, expected ({size}, {size})")
    return gamma


def direction_kalman(omega, q, gamma, g) -> np.ndarray:
    """``d = -Omega (Q^T Q + Gamma)^{-1} Q^T g`` via Cholesky.

    ``gamma`` may be a scalar (``Gamma = gamma I``), a diagonal vector or a
    full ``k' x k'`` SPD matrix. On factorization failure Gamma is multiplied
    by 10, at most three times.
    """
    omega, q, g = _check_pair(omega, q, g)
    k = q.shape[1]
    Gamma = _as_matrix(gamma, k)
    rhs = q.T @ g
    gram = q.T @ q
    for attempt in range(JITTER_RETRIES + 1):
        try:
            factor = linalg.cho_factor(gram + Gamma, lower=True, check_finite=True)
            break
        except linalg.LinAlgError:
            if attempt == JITTER_RETRIES:
                raise IllConditionedError(
                    f"Q^T Q + Gamma not positive definite after {JITTER_RETRIES} jitter increases"
                ) from None
            Gamma = 10.0 * Gamma
    return -(omega @ linalg.cho_solve(factor, rhs))


@dataclass
class CGInfo:
    iterations: int
    residual_norm: float
    converged: bool
    residuals: list


def conjugate_gradient(apply_A, b, apply_Minv=None, x0=None, max_iter=None, rtol=1e-12):
    """Preconditioned conjugate gradients for an SPD operator.

    ``apply_Minv`` applies the inverse preconditioner. Stops when
    ``||r|| <= rtol * ||b||`` or after ``max_iter`` iterations.
    Returns ``(x, CGInfo)``.
    """
    b = np.asarray(b, dtype=float)
    if max_iter is None:
        max_iter = b.size
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_A(x) if x0 is not None else b.copy()
    bnorm = float(np.linalg.norm(b))
    tol = rtol * bnorm
    rnorm = float(np.linalg.norm(r))
    residuals = [rnorm]
    if rnorm <= tol or bnorm == 0.0:
        return x, CGInfo(0, rnorm, True, residuals)
    z = apply_Minv(r) if apply_Minv else r
    p = z.copy()
    rz = float(np.vdot(r, z))
    it = 0
    while it < max_iter:
        Ap = apply_A(p)
        pAp = float(np.vdot(p, Ap))
        if pAp <= 0:
            break
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        it += 1
        rnorm = float(np.linalg.norm(r))
        residuals.append(rnorm)
        if rnorm <= tol:
            break
        z = apply_Minv(r) if apply_Minv else r
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, CGInfo(it, rnorm, rnorm <= tol, residuals)


def direction_gauss_newton(omega, q, gamma, g, sigma, k, *, rtol=1e-10,
                           max_iter=None, return_info=False):
    """``d = -(1/(sigma^2 k)) Omega Q^T z`` with ``(Q Q^T + Gamma) z = g``.

    The ``m x m`` system is solved matrix-free by conjugate gradients
    preconditioned with ``Gamma``; ``Q Q^T`` is never formed. With
    ``Gamma = gamma I`` the preconditioned operator is the identity plus a
    rank-``k'`` term, so ``k' + 1`` iterations are exact in exact
    arithmetic; that is the default iteration cap. A
    :class:`CGConvergenceWarning` is emitted if the cap is hit first.
    """
    omega, q, g = _check_pair(omega, q, g)
    m, kcols = q.shape
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 0:
        gvec = float(gamma)
        apply_gamma = lambda v: gvec * v  # noqa: E731
        apply_minv = lambda v: v / gvec  # noqa: E731
    elif gamma.ndim == 1:
        if gamma.shape != (m,):
            raise ShapeError(f"Gamma diagonal has shape {gamma.shape}, expected ({m},)")
        apply_gamma = lambda v: gamma * v  # noqa: E731
        apply_minv = lambda v: v / gamma  # noqa: E731
    else:
        G = _as_matrix(gamma, m)
        gfac = linalg.cho_factor(G, lower=True)
        apply_gamma = lambda v: G @ v  # noqa: E731
        apply_minv = lambda v: linalg.cho_solve(gfac, v)  # noqa: E731

    def apply_A(v):
        return q @ (q.T @ v) + apply_gamma(v)

    cap = kcols + 1 if max_iter is None else int(max_iter)
    z, info = conjugate_gradient(apply_A, g, apply_minv, max_iter=cap, rtol=rtol)
    if not info.converged:
        warnings.warn(
            f"CG stopped after {info.iterations} iterations with residual {info.residual_norm:.3e}",
            CGConvergenceWarning,
            stacklevel=2,
        )
    d = -(omega @ (q.T @ z)) / (sigma**2 * k)
    if return_info:
        return d, info
    return d


def subsample_gradient(g_full, batch, scheme: str = "scaled", outputs_per_example: int = 1):
    """Zero every output not selected by ``batch``.

    ``scheme='scaled'`` multiplies the kept entries by ``n_examples / |batch|``
    so the expectation over uniform batches equals ``g_full``.
    """
    g_full = np.asarray(g_full, dtype=float)
    batch = np.asarray(batch, dtype=np.intp)
    if batch.size == 0:
        raise ShapeError("batch must not be empty")
    if np.unique(batch).size != batch.size:
        raise ShapeError("batch indices must be distinct")
    p = int(outputs_per_example)
    n_examples = g_full.size // p
    if batch.min() < 0 or batch.max() >= n_examples:
        raise ShapeError("batch index out of range")
    out = np.zeros_like(g_full)
    rows = (batch[:, None] * p + np.arange(p)).ravel()
    out[rows] = g_full[rows]
    if scheme == "scaled":
        out *= n_examples / batch.size
    elif scheme != "unscaled":
        raise ValueError(f"unknown batch scheme {scheme!r}")
    return out

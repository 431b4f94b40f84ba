"""Forward operators, loss functions and the problem library.

An objective has the form ``phi(theta) = D(F(theta))``: ``F`` maps parameters
to an ``m``-vector of outputs and ``D`` is a cheap loss on that vector.
The EnKF path only ever calls ``F.evaluate`` and ``D.gradient``; ``vjp`` /
``analytic_phi_gradient`` exist for baselines and tests.

Outputs are grouped into *examples* (a row of a regression problem, an image
of a classification problem). A mini-batch is an index set over examples and
selects ``outputs_per_example`` consecutive outputs per index.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, NumericError, ShapeError


class ForwardModel(ABC):
    input_dim: int
    n_examples: int
    outputs_per_example: int = 1

    @property
    def output_dim(self) -> int:
        return self.n_examples * self.outputs_per_example

    @abstractmethod
    def evaluate(self, theta: np.ndarray, batch=None) -> np.ndarray:
        """Forward value on all examples, or on ``batch`` only."""

    def vjp(self, theta: np.ndarray, v: np.ndarray, batch=None) -> np.ndarray:
        """Return ``J(theta)^T v``. Only differentiable models implement this."""
        raise CapabilityError(f"{type(self).__name__} has no analytic derivative")

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.input_dim,):
            raise ShapeError(f"theta has shape {theta.shape}, expected ({self.input_dim},)")
        return theta

    def check_batch(self, batch):
        if batch is None:
            return None
        batch = np.asarray(batch, dtype=np.intp)
        if batch.ndim != 1 or batch.size == 0:
            raise ShapeError("batch must be a non-empty 1-D index array")
        if batch.min() < 0 or batch.max() >= self.n_examples:
            raise ShapeError(f"batch indices out of range [0, {self.n_examples})")
        return batch


class LossModel(ABC):
    @abstractmethod
    def loss(self, t: np.ndarray, batch=None) -> float:
        ...

    @abstractmethod
    def gradient(self, t: np.ndarray, batch=None) -> np.ndarray:
        ...


def _finite(t):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise NumericError("loss input contains non-finite values")
    return t


class LeastSquaresLoss(LossModel):
    """``D(t) = 0.5 * ||t - d||^2``; ``d`` defaults to zero."""

    def __init__(self, target=None):
        self.target = None if target is None else np.asarray(target, dtype=float)

    def _residual(self, t, batch):
        t = _finite(t)
        if self.target is None:
            return t
        d = self.target if batch is None else self.target[np.asarray(batch)]
        if d.shape != t.shape:
            raise ShapeError(f"output has shape {t.shape}, target {d.shape}")
        return t - d

    def loss(self, t, batch=None):
        r = self._residual(t, batch)
        return 0.5 * float(r @ r)

    def gradient(self, t, batch=None):
        return self._residual(t, batch)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class SoftmaxCrossEntropy(LossModel):
    """Mean cross-entropy of softmax(logits) against integer labels.

    ``t`` is the flattened ``s x c`` logit matrix of the (batch) examples.
    """

    def __init__(self, labels, n_classes: int):
        self.labels = np.asarray(labels, dtype=np.intp)
        self.n_classes = int(n_classes)

    def _split(self, t, batch):
        t = _finite(t)
        y = self.labels if batch is None else self.labels[np.asarray(batch)]
        if t.size != y.size * self.n_classes:
            raise ShapeError(f"expected {y.size} x {self.n_classes} logits, got {t.size} values")
        return t.reshape(y.size, self.n_classes), y

    def loss(self, t, batch=None):
        logits, y = self._split(t, batch)
        return float(-log_softmax(logits)[np.arange(y.size), y].mean())

    def gradient(self, t, batch=None):
        logits, y = self._split(t, batch)
        g = softmax(logits)
        g[np.arange(y.size), y] -= 1.0
        return (g / y.size).ravel()


class LinearModel(ForwardModel):
    """``F(theta) = A theta - b``."""

    def __init__(self, A, b=None):
        self.A = np.asarray(A, dtype=float)
        self.n_examples, self.input_dim = self.A.shape
        self.b = np.zeros(self.n_examples) if b is None else np.asarray(b, dtype=float)

    def evaluate(self, theta, batch=None):
        theta = self.check_theta(theta)
        batch = self.check_batch(batch)
        if batch is None:
            return self.A @ theta - self.b
        return self.A[batch] @ theta - self.b[batch]

    def jacobian(self, theta=None, batch=None):
        batch = self.check_batch(batch)
        return self.A if batch is None else self.A[batch]

    def vjp(self, theta, v, batch=None):
        return self.jacobian(theta, batch).T @ np.asarray(v, dtype=float)


class OscillatoryModel(ForwardModel):
    """``F(theta) = A theta + eps * sin(l * B theta)`` (entrywise sine)."""

    def __init__(self, A, B, frequency: float, amplitude: float):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        if self.A.shape != self.B.shape:
            raise ShapeError("A and B must have the same shape")
        self.n_examples, self.input_dim = self.A.shape
        self.frequency = float(frequency)
        self.amplitude = float(amplitude)

    def _rows(self, batch):
        if batch is None:
            return self.A, self.B
        return self.A[batch], self.B[batch]

    def evaluate(self, theta, batch=None):
        theta = self.check_theta(theta)
        A, B = self._rows(self.check_batch(batch))
        return A @ theta + self.amplitude * np.sin(self.frequency * (B @ theta))

    def jacobian(self, theta, batch=None):
        theta = self.check_theta(theta)
        A, B = self._rows(self.check_batch(batch))
        c = np.cos(self.frequency * (B @ theta))
        return A + (self.amplitude * self.frequency * c)[:, None] * B

    def vjp(self, theta, v, batch=None):
        theta = self.check_theta(theta)
        A, B = self._rows(self.check_batch(batch))
        v = np.asarray(v, dtype=float)
        c = np.cos(self.frequency * (B @ theta))
        return A.T @ v + self.amplitude * self.frequency * (B.T @ (c * v))


@dataclass
class Problem:
    """A forward model, its loss, a starting point and optional metadata.

    ``theta_star`` is the known minimizer (or the generating truth for
    nonconvex problems) and ``strong_convexity`` the constant ``L`` used by
    the theoretical step-size schedule.
    """

    model: ForwardModel
    loss: LossModel
    theta0: np.ndarray
    theta_star: np.ndarray | None = None
    strong_convexity: float | None = None
    name: str = "problem"
    meta: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.model.input_dim

    def objective(self, theta, batch=None) -> float:
        return self.loss.loss(self.model.evaluate(theta, batch), batch)

    def gradient(self, theta, batch=None) -> np.ndarray:
        return analytic_phi_gradient(self, theta, batch)

    def distance(self, theta) -> float:
        if self.theta_star is None:
            return float("nan")
        return float(np.linalg.norm(np.asarray(theta) - self.theta_star))


def evaluate(model: ForwardModel, theta, batch=None) -> np.ndarray:
    return model.evaluate(theta, batch)


def loss(loss_model: LossModel, t, batch=None) -> float:
    return loss_model.loss(t, batch)


def loss_gradient(loss_model: LossModel, t, batch=None) -> np.ndarray:
    return loss_model.gradient(t, batch)


def analytic_phi_gradient(problem: Problem, theta, batch=None) -> np.ndarray:
    """Exact ``J(theta)^T grad D(F(theta))``; raises CapabilityError if F is not differentiable."""
    t = problem.model.evaluate(theta, batch)
    return problem.model.vjp(theta, problem.loss.gradient(t, batch), batch)


def make_quadratic(m: int = 30, n: int = 20, condition: float = 10.0, seed: int = 0) -> Problem:
    """Strongly convex least-squares problem with prescribed ``cond(A^T A)``.

    The singular values of ``A`` are log-spaced in ``[1, sqrt(condition)]``,
    so ``L = lambda_min(A^T A) = 1``.
    """
    if m < n:
        raise ShapeError("need m >= n for a strongly convex least-squares problem")
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((m, n)))
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    s = np.geomspace(1.0, np.sqrt(condition), n)
    A = (U * s) @ V.T
    b = rng.standard_normal(m)
    theta_star = np.linalg.lstsq(A, b, rcond=None)[0]
    L = float(np.linalg.eigvalsh(A.T @ A)[0])
    return Problem(
        model=LinearModel(A, b),
        loss=LeastSquaresLoss(),
        theta0=np.zeros(n),
        theta_star=theta_star,
        strong_convexity=L,
        name="quadratic",
        meta={"m": m, "n": n, "condition": condition, "seed": seed},
    )


def make_oscillatory(m: int = 300, n: int = 200, frequency: float = 20.0,
                     amplitude: float = 1.0, seed: int = 0, matrix_scale: str = "unit") -> Problem:
    """Oscillatory regression ``A theta + eps sin(l B theta)`` against ``d = F(theta_true)``.

    ``A`` and ``B`` have i.i.d. standard normal entries (``matrix_scale='unit'``)
    or N(0, 1/n) entries (``'normalized'``); ``theta_true`` is standard normal.
    """
    rng = np.random.default_rng(seed)
    if matrix_scale not in ("unit", "normalized"):
        raise ValueError(f"unknown matrix_scale {matrix_scale!r}")
    scale = 1.0 if matrix_scale == "unit" else 1.0 / np.sqrt(n)
    A = scale * rng.standard_normal((m, n))
    B = scale * rng.standard_normal((m, n))
    theta_true = rng.standard_normal(n)
    model = OscillatoryModel(A, B, frequency, amplitude)
    d = model.evaluate(theta_true)
    return Problem(
        model=model,
        loss=LeastSquaresLoss(d),
        theta0=np.zeros(n),
        theta_star=theta_true,
        name="oscillatory",
        meta={"m": m, "n": n, "frequency": frequency, "amplitude": amplitude, "seed": seed,
              "matrix_scale": matrix_scale},
    )

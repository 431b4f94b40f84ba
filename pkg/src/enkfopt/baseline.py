"""Gradient-based reference optimizers (SGD and ADAM).

These use analytic derivatives: ``Problem.gradient`` for the problem
library and the network's reverse pass for classification. Cost is
reported both in forward evaluations and in forward-equivalents, where one
forward-backward pass counts as two forwards.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, NumericError
from .network import ForwardNetwork
from .optimizer import RunTrace, TraceRecord
from .problems import Problem, log_softmax, softmax
from .sampler import BATCH_STREAM, make_stream
from .varpro import OuterRecord, cross_entropy, predict

SCHEDULES = ("per_step", "per_epoch", "constant")


@dataclass(frozen=True)
class AdamParams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "per_step"

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")

    def rate(self, j: int) -> float:
        """Learning rate at counter ``j >= 1`` (a step or an epoch index)."""
        if self.schedule == "constant":
            return self.lr
        return self.lr / np.sqrt(j)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def sgd_step(x, g, lr: float) -> np.ndarray:
    return np.asarray(x, dtype=float) - lr * np.asarray(g, dtype=float)


def adam_step(x, g, state: AdamState, params: AdamParams, lr: float | None = None) -> np.ndarray:
    """One bias-corrected ADAM update; ``state`` is updated in place.

    ``lr`` overrides the schedule; by default the rate is ``params.rate(t)``
    at the new step count ``t``.
    """
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    state.t += 1
    b1, b2 = params.beta1, params.beta2
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    eta = params.rate(state.t) if lr is None else lr
    return np.asarray(x, dtype=float) - eta * m_hat / (np.sqrt(v_hat) + params.eps)


@dataclass
class GradientSettings:
    method: str = "adam"
    adam: AdamParams = field(default_factory=AdamParams)
    lr: float = 1e-3
    batch_size: int | None = None

    def __post_init__(self):
        if self.method not in ("adam", "sgd"):
            raise ConfigError("method must be 'adam' or 'sgd'")


def _epoch_batches(rng, n, size):
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + size]) for i in range(0, n, size)]


def run_gradient(problem: Problem, settings: GradientSettings, iterations: int, seed: int = 0,
                 theta0=None, on_record=None) -> RunTrace:
    """Minimize a library problem with analytic (mini-batch) gradients."""
    theta = np.array(problem.theta0 if theta0 is None else theta0, dtype=float)
    rng = make_stream(seed, BATCH_STREAM)
    n_ex = problem.model.n_examples
    state = AdamState.zeros(theta.size)
    fwd = fwd_ex = 0
    epoch, queue = 0, []
    start = time.perf_counter()
    trace = RunTrace(meta={"optimizer": settings.method, "stop_reason": "budget"})

    def record(j, lr):
        rec = TraceRecord(iter=j, objective=problem.objective(theta),
                          dist_to_opt=problem.distance(theta), step_size=lr, fwd_evals=fwd,
                          wall_ms=1e3 * (time.perf_counter() - start), fwd_examples=fwd_ex // 2,
                          fwd_examples_fb=fwd_ex)
        trace.records.append(rec)
        if on_record:
            on_record(rec)

    record(0, 0.0)
    for j in range(1, iterations + 1):
        batch = None
        if settings.batch_size is not None:
            if not queue:
                epoch += 1
                queue = _epoch_batches(rng, n_ex, settings.batch_size)
            batch = queue.pop(0)
        g = problem.gradient(theta, batch)
        if batch is not None:
            g = g * (n_ex / batch.size)
        fwd += 1
        fwd_ex += 2 * (n_ex if batch is None else batch.size)
        if settings.method == "sgd":
            lr = settings.lr
            theta = sgd_step(theta, g, lr)
        else:
            counter = epoch if (batch is not None and settings.adam.schedule == "per_epoch") else j
            lr = settings.adam.rate(max(counter, 1))
            theta = adam_step(theta, g, state, settings.adam, lr)
        if not np.all(np.isfinite(theta)):
            raise NumericError("iterate diverged")
        record(j, lr)
    trace.meta["theta"] = theta
    return trace


def joint_loss_and_grad(network: ForwardNetwork, theta, W, X, y, weight_decay: float):
    """Regularized cross-entropy of ``W`` on network features and its gradient in ``(theta, W)``."""
    Z, caches = network.forward_with_cache(theta, X)
    s = Z.shape[0]
    Za = np.hstack([Z, np.ones((s, 1))])
    logits = Za @ W.T
    Wm = W.copy()
    Wm[:, -1] = 0.0
    value = -log_softmax(logits)[np.arange(s), y].mean() + 0.5 * weight_decay * float(np.sum(Wm * Wm))
    P = softmax(logits)
    P[np.arange(s), y] -= 1.0
    P /= s
    gW = P.T @ Za + weight_decay * Wm
    gtheta = network.backward(theta, caches, P @ W[:, :-1])
    return float(value), gtheta, gW


def train_network_gradient(network: ForwardNetwork, dataset: LabeledDataset, settings: GradientSettings,
                           steps: int, theta0, weight_decay: float = 0.0, seed: int = 0,
                           record_every: int = 1, on_record=None) -> RunTrace:
    """Joint gradient training of the network weights and the softmax head.

    Runs ``steps`` mini-batch steps (epochs reshuffle the training set) and
    writes one record every ``record_every`` steps plus one at the end.
    Monitoring passes on the full train and test splits
    are not counted in the forward budget.
    """
    if settings.batch_size is None:
        raise ConfigError("network training needs a batch_size")
    n_theta = network.n_params
    c, p = dataset.n_classes, network.feature_dim
    x = np.concatenate([np.asarray(theta0, dtype=float), np.zeros(c * (p + 1))])
    state = AdamState.zeros(x.size)
    rng = make_stream(seed, BATCH_STREAM)
    Xtr, ytr = dataset.X_train, dataset.y_train
    fwd = fwd_ex = 0
    start = time.perf_counter()
    trace = RunTrace(meta={"optimizer": settings.method, "stop_reason": "budget"})

    def record(j, lr):
        theta, W = x[:n_theta], x[n_theta:].reshape(c, p + 1)
        train_loss, _, _ = joint_loss_and_grad(network, theta, W, Xtr, ytr, weight_decay)
        Ztr = network.forward(theta, Xtr)
        Zte = network.forward(theta, dataset.X_test)
        rec = OuterRecord(iter=j, objective=train_loss, dist_to_opt=float("nan"), step_size=lr,
                          fwd_evals=fwd, wall_ms=1e3 * (time.perf_counter() - start),
                          fwd_examples=fwd_ex // 2, train_loss=train_loss,
                          test_loss=cross_entropy(W, Zte, dataset.y_test),
                          train_acc=float(np.mean(predict(W, Ztr) == ytr)),
                          test_acc=float(np.mean(predict(W, Zte) == dataset.y_test)),
                          fwd_examples_fb=fwd_ex)
        trace.records.append(rec)
        if on_record:
            on_record(rec)

    record(0, 0.0)
    j = epoch = 0
    lr = 0.0
    queue = []
    while j < steps:
        if not queue:
            epoch += 1
            queue = _epoch_batches(rng, Xtr.shape[0], settings.batch_size)
        batch = queue.pop(0)
        j += 1
        theta, W = x[:n_theta], x[n_theta:].reshape(c, p + 1)
        _, gt, gW = joint_loss_and_grad(network, theta, W, Xtr[batch], ytr[batch], weight_decay)
        g = np.concatenate([gt, gW.ravel()])
        fwd += 1
        fwd_ex += 2 * batch.size
        if settings.method == "sgd":
            lr = settings.lr
            x = sgd_step(x, g, lr)
        else:
            lr = settings.adam.rate(epoch if settings.adam.schedule == "per_epoch" else j)
            x = adam_step(x, g, state, settings.adam, lr)
        if not np.all(np.isfinite(x)):
            raise NumericError("iterate diverged")
        if j % record_every == 0:
            record(j, lr)
    if j % record_every != 0:
        record(j, lr)
    trace.meta["theta"] = x[:n_theta]
    trace.meta["W"] = x[n_theta:].reshape(c, p + 1)
    return trace

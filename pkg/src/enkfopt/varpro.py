"""Variable-projection training: convex softmax head, derivative-free body.

The classifier head ``W`` (classes x features+1, last column = bias) is
eliminated by solving the regularized softmax regression exactly with
inexact Newton-CG; the network weights ``theta`` are then moved by one EnKF
step on a mini-batch with ``W`` held fixed.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LabeledDataset
from .directions import conjugate_gradient
from .errors import ConfigError, NumericError, RunFailed, EnKFError, ShapeError
from .linesearch import ArmijoParams
from .network import FeatureModel, ForwardNetwork
from .optimizer import EnKFSettings, OptimizerState, RunTrace, TraceRecord, step
from .problems import LossModel, Problem, log_softmax, softmax
from .sampler import PerturbationSpec


@dataclass(frozen=True)
class InnerSolveParams:
    newton_iters: int = 10
    cg_iters_max: int = 20
    weight_decay: float = 100.0
    cg_tolerance: float = 1e-4
    grad_tol: float = 1e-9
    max_halvings: int = 10

    def __post_init__(self):
        if self.newton_iters < 1 or self.cg_iters_max < 1:
            raise ConfigError("newton_iters and cg_iters_max must be positive")
        if self.weight_decay < 0 or self.cg_tolerance <= 0:
            raise ConfigError("weight_decay must be >= 0 and cg_tolerance > 0")


def _augment(Z):
    Z = np.asarray(Z, dtype=float)
    return np.hstack([Z, np.ones((Z.shape[0], 1))])


def _decay_mask(W):
    mask = np.ones_like(W)
    mask[:, -1] = 0.0
    return mask


def _check(W, Z, labels):
    W = np.asarray(W, dtype=float)
    Z = np.asarray(Z, dtype=float)
    labels = np.asarray(labels, dtype=np.intp)
    if W.ndim != 2 or Z.ndim != 2 or W.shape[1] != Z.shape[1] + 1:
        raise ShapeError(f"W {W.shape} must be classes x (features + 1) for Z {Z.shape}")
    if labels.shape != (Z.shape[0],):
        raise ShapeError("one label per feature row required")
    return W, Z, labels


def classifier_objective(W, Z, labels, weight_decay: float = 100.0):
    """Mean softmax cross-entropy plus ``weight_decay/2 ||W||^2`` (bias excluded).

    Returns ``(value, gradient)`` with the gradient shaped like ``W``.
    """
    W, Z, labels = _check(W, Z, labels)
    Za = _augment(Z)
    s = Za.shape[0]
    logits = Za @ W.T
    logp = log_softmax(logits)
    Wm = W * _decay_mask(W)
    value = -logp[np.arange(s), labels].mean() + 0.5 * weight_decay * float(np.sum(Wm * Wm))
    P = np.exp(logp)
    P[np.arange(s), labels] -= 1.0
    grad = P.T @ Za / s + weight_decay * Wm
    return float(value), grad


def hessian_vector_product(W, Z, labels, V, weight_decay: float = 100.0):
    """Exact Hessian of :func:`classifier_objective` at ``W`` applied to ``V``."""
    W, Z, labels = _check(W, Z, labels)
    V = np.asarray(V, dtype=float)
    if V.shape != W.shape:
        raise ShapeError(f"V has shape {V.shape}, expected {W.shape}")
    Za = _augment(Z)
    return _hvp(softmax(Za @ W.T), Za, V, weight_decay)


def _hvp(P, Za, V, weight_decay):
    R = Za @ V.T
    PR = P * R
    S = PR - P * PR.sum(axis=1, keepdims=True)
    return S.T @ Za / Za.shape[0] + weight_decay * V * _decay_mask(V)


@dataclass
class InnerResult:
    W: np.ndarray
    objective: float
    grad_norm: float
    newton_steps: int
    history: list = field(default_factory=list)


def solve_inner(Z, labels, params: InnerSolveParams = InnerSolveParams(), W_init=None,
                n_classes: int | None = None) -> InnerResult:
    """Damped inexact Newton-CG on the convex classifier objective.

    Each Newton direction comes from at most ``cg_iters_max`` CG iterations;
    the step is halved (at most ``max_halvings`` times) until the objective
    decreases, otherwise the iteration stops. The objective history is
    therefore non-increasing.
    """
    Z = np.asarray(Z, dtype=float)
    labels = np.asarray(labels, dtype=np.intp)
    if W_init is None:
        c = int(labels.max()) + 1 if n_classes is None else int(n_classes)
        W = np.zeros((c, Z.shape[1] + 1))
    else:
        W = np.array(W_init, dtype=float)
    lam = params.weight_decay
    Za = _augment(Z)
    f, G = classifier_objective(W, Z, labels, lam)
    if not np.isfinite(f):
        raise NumericError("classifier objective is not finite at the initial W")
    history = [f]
    steps = 0
    for _ in range(params.newton_iters):
        gnorm = float(np.linalg.norm(G))
        if gnorm <= params.grad_tol:
            break
        P = softmax(Za @ W.T)
        shape = W.shape
        apply_H = lambda v: _hvp(P, Za, v.reshape(shape), lam).ravel()  # noqa: E731
        s_dir, _ = conjugate_gradient(apply_H, -G.ravel(), max_iter=params.cg_iters_max,
                                      rtol=params.cg_tolerance)
        s_dir = s_dir.reshape(shape)
        slope = float(np.sum(G * s_dir))
        t = 1.0
        accepted = False
        for _ in range(params.max_halvings + 1):
            f_new, G_new = classifier_objective(W + t * s_dir, Z, labels, lam)
            if not np.isfinite(f_new):
                raise NumericError("classifier objective became non-finite")
            if f_new <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        W = W + t * s_dir
        f, G = f_new, G_new
        history.append(f)
        steps += 1
    return InnerResult(W, f, float(np.linalg.norm(G)), steps, history)


def predict(W, Z) -> np.ndarray:
    return np.argmax(_augment(Z) @ np.asarray(W).T, axis=1)


def cross_entropy(W, Z, labels) -> float:
    logp = log_softmax(_augment(Z) @ np.asarray(W).T)
    return float(-logp[np.arange(len(labels)), labels].mean())


class ClassifierLoss(LossModel):
    """Loss on flattened features for a fixed head ``W``: mean CE + weight decay."""

    def __init__(self, W, labels, weight_decay: float = 100.0):
        self.W = np.asarray(W, dtype=float)
        self.labels = np.asarray(labels, dtype=np.intp)
        self.weight_decay = float(weight_decay)

    def _features(self, t, batch):
        y = self.labels if batch is None else self.labels[np.asarray(batch)]
        p = self.W.shape[1] - 1
        t = np.asarray(t, dtype=float)
        if t.size != y.size * p:
            raise ShapeError(f"expected {y.size} x {p} features, got {t.size} values")
        return t.reshape(y.size, p), y

    def loss(self, t, batch=None):
        Z, y = self._features(t, batch)
        if not np.all(np.isfinite(Z)):
            return float("inf")
        return classifier_objective(self.W, Z, y, self.weight_decay)[0]

    def gradient(self, t, batch=None):
        Z, y = self._features(t, batch)
        P = softmax(_augment(Z) @ self.W.T)
        P[np.arange(y.size), y] -= 1.0
        return (P @ self.W[:, :-1] / y.size).ravel()


@dataclass
class OuterRecord(TraceRecord):
    train_loss: float = float("nan")
    test_loss: float = float("nan")
    train_acc: float = float("nan")
    test_acc: float = float("nan")


@dataclass
class OuterSettings:
    """EnKF settings for the outer loop (defaults: 4 particles, batch of 16)."""

    particles: int = 4
    sigma: float = 0.02
    batch_size: int = 16
    direction: str = "identity"
    step_rule: ArmijoParams = field(default_factory=ArmijoParams)
    line_search_data: str = "full"
    distribution: str = "gaussian"


def save_checkpoint(path, state: OptimizerState, W, extra=None) -> None:
    streams = {
        "perturb": state.perturb_stream.bit_generator.state,
        "batch": state.batch_stream.bit_generator.state,
    }
    meta = {
        "iteration": state.iteration,
        "fwd_evals": state.fwd_evals,
        "fwd_examples": state.fwd_examples,
        "mu_next": state.mu_next,
        "streams": streams,
        "extra": extra or {},
    }
    np.savez(path, theta=state.theta, W=np.asarray(W), meta=json.dumps(meta, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return {"__uint64__": [int(v) for v in obj]}
    return int(obj)


def _restore_arrays(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__uint64__"}:
            return np.array(obj["__uint64__"], dtype=np.uint64)
        return {k: _restore_arrays(v) for k, v in obj.items()}
    return obj


def load_checkpoint(path, spec: PerturbationSpec):
    """Return ``(state, W, extra)`` restored from :func:`save_checkpoint` output."""
    with np.load(path) as data:
        theta, W = data["theta"].copy(), data["W"].copy()
        meta = _restore_arrays(json.loads(str(data["meta"])))
    state = OptimizerState.initial(theta, spec)
    state.iteration = meta["iteration"]
    state.fwd_evals = meta["fwd_evals"]
    state.fwd_examples = meta["fwd_examples"]
    state.mu_next = meta["mu_next"]
    state.perturb_stream.bit_generator.state = meta["streams"]["perturb"]
    state.batch_stream.bit_generator.state = meta["streams"]["batch"]
    return state, W, meta["extra"]


def train_outer(network: ForwardNetwork, dataset: LabeledDataset, settings: OuterSettings,
                inner: InnerSolveParams, iterations: int, theta0, seed: int = 0,
                scheduler=None, on_record=None, checkpoint=None, resume=False) -> RunTrace:
    """Alternate the exact head solve with one EnKF step on the network weights.

    Record 0 holds the metrics after the initial head solve; record ``j``
    those after ``j`` outer iterations. With ``line_search_data='full'`` the
    step is accepted on the full training objective at the current head,
    and the warm-started head solve never increases it, so the recorded
    training loss is non-increasing. ``fwd_examples`` counts example forward
    propagations spent by the algorithm (monitoring of the test split is
    not counted).
    """
    if iterations < 0:
        raise ConfigError("iterations must be >= 0")
    model = FeatureModel(network, dataset.X_train)
    spec = PerturbationSpec(network.n_params, settings.particles, settings.sigma,
                            settings.distribution, seed)
    enkf = EnKFSettings(direction=settings.direction, step_rule=settings.step_rule,
                        batch_size=settings.batch_size,
                        line_search_data=settings.line_search_data)
    s_train = dataset.X_train.shape[0]
    W = None
    if resume and checkpoint is not None:
        state, W, _ = load_checkpoint(checkpoint, spec)
    else:
        state = OptimizerState.initial(theta0, spec)
    loss = ClassifierLoss(np.zeros((dataset.n_classes, network.feature_dim + 1)),
                          dataset.y_train, inner.weight_decay)
    problem = Problem(model, loss, theta0=state.theta, name="varpro")
    trace = RunTrace(meta={"n_params": network.n_params, "stop_reason": "budget"})
    start = time.perf_counter()

    def solve_and_record(mu, trials, null_step):
        nonlocal W
        Z = model.features(state.theta)
        state.fwd_evals += 1
        state.fwd_examples += s_train
        res = solve_inner(Z, dataset.y_train, inner, W_init=W, n_classes=dataset.n_classes)
        W = res.W
        loss.W = W
        Zt = network.forward(state.theta, dataset.X_test)
        rec = OuterRecord(
            iter=state.iteration,
            objective=res.objective,
            dist_to_opt=float("nan"),
            step_size=mu,
            fwd_evals=state.fwd_evals,
            wall_ms=1e3 * (time.perf_counter() - start),
            fwd_examples=state.fwd_examples,
            trials=trials,
            null_step=null_step,
            train_loss=res.objective,
            test_loss=cross_entropy(W, Zt, dataset.y_test),
            train_acc=float(np.mean(predict(W, Z) == dataset.y_train)),
            test_acc=float(np.mean(predict(W, Zt) == dataset.y_test)),
            fwd_examples_fb=state.fwd_examples,
        )
        trace.records.append(rec)
        if on_record:
            on_record(rec)
        return rec

    try:
        rec = solve_and_record(0.0, 0, False)
        end = state.iteration + iterations
        while state.iteration < end:
            _, srec = step(state, problem, enkf, scheduler, phi_full=rec.train_loss)
            rec = solve_and_record(srec.step_size, srec.trials, srec.null_step)
            if checkpoint is not None:
                save_checkpoint(checkpoint, state, W)
    except EnKFError as exc:
        trace.meta["stop_reason"] = f"error: {exc}"
        raise RunFailed(exc, trace) from exc
    trace.meta["theta"] = state.theta
    trace.meta["W"] = W
    trace.meta["settings"] = asdict(settings)
    return trace

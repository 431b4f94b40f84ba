"""The derivative-free EnKF iteration and its memory variant.

One iteration draws ``k`` particle offsets, evaluates the forward operator at
the current mean and at every particle (``k + 1`` evaluations), forms the
difference block ``Q``, and moves the mean along ``-Omega H^{-1} Q^T grad D``.
Only the mean is propagated; particles are redrawn every iteration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import directions as dirs
from .errors import ConfigError, EnKFError, ParticleEvaluationError, RunFailed, ShapeError
from .linesearch import ArmijoParams, armijo_line_search, theoretical_step_size
from .parallel import ParticleScheduler
from .problems import Problem
from .sampler import (BATCH_STREAM, PERTURBATION_STREAM, PerturbationSpec,
                      draw_perturbations, make_stream)

DIRECTIONS = ("identity", "kalman", "gauss-newton")


@dataclass(frozen=True)
class TheoreticalSchedule:
    """``mu_j = 1/(j L k sigma^2)``; ``L=None`` takes it from the problem."""

    L: float | None = None


@dataclass
class EnKFSettings:
    direction: str = "identity"
    memory: int | None = None
    step_rule: ArmijoParams | TheoreticalSchedule = field(default_factory=ArmijoParams)
    # None selects the adaptive default 1e-4 * trace(Q^T Q) / k'
    gamma_kalman: float | None = None
    gamma_gn: float | None = None
    batch_size: int | None = None
    batch_scheme: str = "scaled"
    # "batch": probe the mini-batch objective; "full": probe the full objective
    line_search_data: str = "batch"
    objective_tol: float | None = None
    direction_tol: float | None = None
    cg_rtol: float = 1e-8

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.memory is not None and self.memory < 1:
            raise ConfigError("memory capacity must be >= 1")
        if self.memory is not None and self.batch_size is not None:
            raise ConfigError("the memory variant cannot be combined with mini-batches")
        if self.batch_scheme not in ("scaled", "unscaled"):
            raise ConfigError(f"unknown batch scheme {self.batch_scheme!r}")
        if self.line_search_data not in ("batch", "full"):
            raise ConfigError(f"unknown line_search_data {self.line_search_data!r}")


class EvalBuffer:
    """Most recent ``capacity`` (omega, q) column pairs, oldest evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = int(capacity)
        self.omega = None
        self.q = None

    def __len__(self):
        return 0 if self.omega is None else self.omega.shape[1]

    def extend(self, omega, q):
        omega = np.asarray(omega, dtype=float)
        q = np.asarray(q, dtype=float)
        if omega.shape[1] != q.shape[1]:
            raise ShapeError("omega and q blocks must have equal column counts")
        if self.omega is None:
            self.omega, self.q = omega, q
        else:
            if omega.shape[0] != self.omega.shape[0] or q.shape[0] != self.q.shape[0]:
                raise ShapeError("new columns do not match buffered row dimensions")
            self.omega = np.hstack([self.omega, omega])
            self.q = np.hstack([self.q, q])
        if len(self) > self.capacity:
            self.omega = self.omega[:, -self.capacity:]
            self.q = self.q[:, -self.capacity:]

    def matrices(self):
        return self.omega, self.q


@dataclass
class OptimizerState:
    theta: np.ndarray
    spec: PerturbationSpec
    iteration: int = 0
    fwd_evals: int = 0
    fwd_examples: int = 0
    buffer: EvalBuffer | None = None
    mu_next: float | None = None
    perturb_stream: np.random.Generator | None = None
    batch_stream: np.random.Generator | None = None

    @classmethod
    def initial(cls, theta0, spec: PerturbationSpec, memory: int | None = None):
        theta0 = np.array(theta0, dtype=float)
        if theta0.shape != (spec.dimension,):
            raise ShapeError(f"theta0 has shape {theta0.shape}, spec dimension is {spec.dimension}")
        return cls(
            theta=theta0,
            spec=spec,
            buffer=None if memory is None else EvalBuffer(memory),
            perturb_stream=make_stream(spec.seed, PERTURBATION_STREAM),
            batch_stream=make_stream(spec.seed, BATCH_STREAM),
        )


@dataclass
class TraceRecord:
    iter: int
    objective: float
    dist_to_opt: float
    step_size: float
    fwd_evals: int
    wall_ms: float
    fwd_examples: int = 0
    trials: int = 0
    null_step: bool = False
    direction_norm: float = float("nan")
    fwd_examples_fb: int = 0


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def __len__(self):
        return len(self.records)


def build_delta_matrix(model, theta_bar, omega, batch=None, scheduler: ParticleScheduler | None = None):
    """Evaluate ``F`` at the center and at each particle.

    Returns ``(Q, F(theta_bar))`` where column ``i`` of ``Q`` is
    ``F(theta_bar + omega_i) - F(theta_bar)``. Exactly ``k + 1`` forward
    evaluations, all on the same ``batch``.
    """
    theta_bar = np.asarray(theta_bar, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 2 or omega.shape[0] != theta_bar.size:
        raise ShapeError(f"omega has shape {omega.shape}, expected ({theta_bar.size}, k)")
    k = omega.shape[1]
    points = [theta_bar] + [theta_bar + omega[:, i] for i in range(k)]
    labels = [None] + list(range(k))

    def fwd(theta):
        return np.asarray(model.evaluate(theta, batch), dtype=float)

    if scheduler is None:
        with ParticleScheduler(1) as serial:
            outputs = serial.map(fwd, points, labels)
    else:
        outputs = scheduler.map(fwd, points, labels)
    for label, out in zip(labels, outputs):
        if not np.all(np.isfinite(out)):
            what = "center F(theta_bar)" if label is None else f"particle {label}"
            raise ParticleEvaluationError(f"non-finite forward output for {what}", label)
    center = outputs[0]
    q = np.column_stack([out - center for out in outputs[1:]]) if k else np.zeros((center.size, 0))
    return q, center


def compute_direction(settings: EnKFSettings, omega, q, g, sigma, k):
    if settings.direction == "identity":
        return dirs.direction_identity(omega, q, g)
    if settings.direction == "kalman":
        gamma = dirs.default_gamma(q) if settings.gamma_kalman is None else settings.gamma_kalman
        return dirs.direction_kalman(omega, q, gamma, g)
    gamma = dirs.default_gamma(q) if settings.gamma_gn is None else settings.gamma_gn
    return dirs.direction_gauss_newton(omega, q, gamma, g, sigma, k, rtol=settings.cg_rtol)


def _draw_batch(state: OptimizerState, problem: Problem, size: int):
    n_examples = problem.model.n_examples
    if size > n_examples:
        raise ConfigError(f"batch size {size} exceeds {n_examples} examples")
    return np.sort(state.batch_stream.choice(n_examples, size=size, replace=False))


def step(state: OptimizerState, problem: Problem, settings: EnKFSettings,
         scheduler: ParticleScheduler | None = None, *, phi_full=None, wall_start=None):
    """Advance ``state`` by one iteration (in place) and return ``(state, record)``.

    ``phi_full`` optionally supplies the full-data objective at the current
    mean, which spares one evaluation when ``line_search_data='full'`` is
    combined with mini-batches.
    """
    model = problem.model
    spec = state.spec
    j = state.iteration
    sigma = spec.sigma_at(j)
    k = spec.particle_count
    omega = draw_perturbations(spec, state.perturb_stream, sigma)

    batch = None
    if settings.batch_size is not None:
        batch = _draw_batch(state, problem, settings.batch_size)
    per_eval = model.n_examples if batch is None else batch.size

    q, center = build_delta_matrix(model, state.theta, omega, batch, scheduler)
    state.fwd_evals += k + 1
    state.fwd_examples += (k + 1) * per_eval

    g = problem.loss.gradient(center, batch)
    if batch is not None and settings.batch_scheme == "scaled":
        g = g * (model.n_examples / batch.size)

    if state.buffer is not None:
        state.buffer.extend(omega, q)
        omega_use, q_use = state.buffer.matrices()
    else:
        omega_use, q_use = omega, q
    d = compute_direction(settings, omega_use, q_use, g, sigma, k)

    full_probe = batch is None or settings.line_search_data == "full"
    probe_batch = None if full_probe else batch
    probe_cost = model.n_examples if full_probe else batch.size

    def phi(theta):
        state.fwd_evals += 1
        state.fwd_examples += probe_cost
        return problem.objective(theta, probe_batch)

    trials, null_step = 0, False
    value = None
    rule = settings.step_rule
    if isinstance(rule, ArmijoParams):
        if batch is None:
            phi0 = problem.loss.loss(center)
        elif settings.line_search_data == "batch":
            phi0 = problem.loss.loss(center, batch)
        else:
            phi0 = phi(state.theta) if phi_full is None else float(phi_full)
        mu0 = rule.mu0 if state.mu_next is None else state.mu_next
        res = armijo_line_search(phi, state.theta, d, mu0, rule, phi0=phi0)
        mu, trials, null_step = res.mu, res.trials, res.null_step
        if not null_step:
            state.mu_next = rule.growth * mu
        if full_probe:
            value = res.value
    else:
        L = rule.L if rule.L is not None else problem.strong_convexity
        if L is None:
            raise ConfigError("theoretical schedule needs a strong-convexity constant L")
        mu = theoretical_step_size(j + 1, L, k, sigma)

    if mu != 0.0:
        state.theta = state.theta + mu * d
    if value is None:
        # monitoring evaluation, not part of the algorithm's budget
        value = problem.objective(state.theta)
    state.iteration = j + 1
    wall_ms = 0.0 if wall_start is None else 1e3 * (time.perf_counter() - wall_start)
    record = TraceRecord(
        iter=state.iteration,
        objective=float(value),
        dist_to_opt=problem.distance(state.theta),
        step_size=float(mu),
        fwd_evals=state.fwd_evals,
        wall_ms=wall_ms,
        fwd_examples=state.fwd_examples,
        trials=trials,
        null_step=null_step,
        direction_norm=float(np.linalg.norm(d)),
        fwd_examples_fb=state.fwd_examples,
    )
    return state, record


def step_with_memory(state: OptimizerState, buffer: EvalBuffer, problem: Problem,
                     settings: EnKFSettings, scheduler=None, **kwargs):
    """Memory variant: the direction uses every buffered (omega, q) column.

    Returns ``(state, buffer, record)``; only ``k + 1`` fresh forward
    evaluations are spent per iteration.
    """
    if buffer.capacity < state.spec.particle_count:
        raise ConfigError("buffer capacity must be at least the particle count")
    state.buffer = buffer
    state, record = step(state, problem, settings, scheduler, **kwargs)
    return state, state.buffer, record


def initial_record(state: OptimizerState, problem: Problem) -> TraceRecord:
    return TraceRecord(
        iter=state.iteration,
        objective=float(problem.objective(state.theta)),
        dist_to_opt=problem.distance(state.theta),
        step_size=0.0,
        fwd_evals=state.fwd_evals,
        wall_ms=0.0,
        fwd_examples=state.fwd_examples,
        fwd_examples_fb=state.fwd_examples,
    )


def run(problem: Problem, settings: EnKFSettings, spec: PerturbationSpec, iterations: int,
        scheduler: ParticleScheduler | None = None, on_record=None, theta0=None) -> RunTrace:
    """Run ``iterations`` EnKF steps from ``problem.theta0``.

    ``on_record`` is called with every record as soon as it exists (used
    for incremental persistence). Stops early when the objective drops to
    ``objective_tol`` or the direction norm to ``direction_tol``. Errors
    are re-raised as :class:`RunFailed` carrying the partial trace.
    """
    if iterations < 0:
        raise ConfigError("iterations must be >= 0")
    if settings.memory is not None and settings.memory < spec.particle_count:
        raise ConfigError("memory capacity must be at least the particle count")
    state = OptimizerState.initial(problem.theta0 if theta0 is None else theta0, spec, settings.memory)
    trace = RunTrace(meta={"stop_reason": "budget"})
    start = time.perf_counter()
    try:
        rec = initial_record(state, problem)
        trace.records.append(rec)
        if on_record:
            on_record(rec)
        for _ in range(iterations):
            state, rec = step(state, problem, settings, scheduler, wall_start=start)
            trace.records.append(rec)
            if on_record:
                on_record(rec)
            if settings.objective_tol is not None and rec.objective <= settings.objective_tol:
                trace.meta["stop_reason"] = "objective_tol"
                break
            if settings.direction_tol is not None and rec.direction_norm <= settings.direction_tol:
                trace.meta["stop_reason"] = "direction_tol"
                break
    except EnKFError as exc:
        trace.meta["stop_reason"] = f"error: {exc}"
        raise RunFailed(exc, trace) from exc
    trace.meta["theta"] = state.theta
    return trace

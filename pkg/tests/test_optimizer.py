import numpy as np
import pytest

from enkfopt.errors import ConfigError, ParticleEvaluationError, RunFailed
from enkfopt.linesearch import ArmijoParams
from enkfopt.optimizer import (EnKFSettings, EvalBuffer, OptimizerState, TheoreticalSchedule,
                               build_delta_matrix, run, step, step_with_memory)
from enkfopt.parallel import ParticleScheduler
from enkfopt.problems import (ForwardModel, LeastSquaresLoss, LinearModel, Problem, make_oscillatory,
                              make_quadratic)
from enkfopt.sampler import PerturbationSpec, draw_perturbations, make_stream


class CountingModel(ForwardModel):
    """Wraps a model and records every evaluation's batch."""

    def __init__(self, inner):
        self.inner = inner
        self.input_dim = inner.input_dim
        self.n_examples = inner.n_examples
        self.outputs_per_example = inner.outputs_per_example
        self.calls = []

    def evaluate(self, theta, batch=None):
        self.calls.append(None if batch is None else tuple(np.asarray(batch)))
        return self.inner.evaluate(theta, batch)


class FlakyModel(ForwardModel):
    """Returns NaN for one specific particle offset pattern after ``after`` calls."""

    def __init__(self, inner, after):
        self.inner, self.after, self.count = inner, after, 0
        self.input_dim, self.n_examples = inner.input_dim, inner.n_examples

    def evaluate(self, theta, batch=None):
        self.count += 1
        out = self.inner.evaluate(theta, batch)
        return out * np.nan if self.count > self.after else out


def test_zero_perturbations_give_zero_q():
    p = make_oscillatory(m=30, n=20, seed=0)
    q, center = build_delta_matrix(p.model, np.ones(20), np.zeros((20, 4)))
    assert q.shape == (30, 4) and not q.any()
    np.testing.assert_array_equal(center, p.model.evaluate(np.ones(20)))


def test_linear_q_is_a_omega():
    p = make_quadratic(seed=0)
    rng = np.random.default_rng(0)
    omega = rng.standard_normal((20, 6))
    theta = rng.standard_normal(20)
    q, _ = build_delta_matrix(p.model, theta, omega)
    A = p.model.A
    scale = np.abs(A).sum(axis=1)[:, None] * (np.abs(theta).max() + np.abs(omega).max())
    assert np.all(np.abs(q - A @ omega) <= 8 * np.finfo(float).eps * scale)


def test_non_finite_output_names_particle():
    class Bad(ForwardModel):
        input_dim, n_examples = 2, 2

        def evaluate(self, theta, batch=None):
            return np.array([1.0, np.inf]) if theta[0] > 5 else np.asarray(theta)

    omega = np.array([[0.0, 10.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(ParticleEvaluationError) as info:
        build_delta_matrix(Bad(), np.zeros(2), omega)
    assert info.value.particle == 1


def test_step_counts_k_plus_one_plus_probes():
    base = make_quadratic(seed=1)
    model = CountingModel(base.model)
    p = Problem(model, base.loss, base.theta0, base.theta_star, base.strong_convexity)
    spec = PerturbationSpec(20, 7, 0.1, seed=3)
    state = OptimizerState.initial(p.theta0, spec)
    state, rec = step(state, p, EnKFSettings())
    assert rec.fwd_evals == 7 + 1 + rec.trials
    assert len(model.calls) == rec.fwd_evals
    assert rec.iter == 1


def test_step_counts_without_monitoring_on_full_data():
    base = make_quadratic(seed=1)
    model = CountingModel(base.model)
    p = Problem(model, base.loss, base.theta0)
    spec = PerturbationSpec(20, 4, 0.1, seed=3)
    state = OptimizerState.initial(p.theta0, spec)
    state, rec = step(state, p, EnKFSettings())
    if not rec.null_step:
        assert len(model.calls) == rec.fwd_evals == 5 + rec.trials


def test_batch_is_shared_by_all_evaluations():
    base = make_oscillatory(m=40, n=10, seed=0)
    model = CountingModel(base.model)
    p = Problem(model, base.loss, base.theta0)
    spec = PerturbationSpec(10, 5, 0.1, seed=0)
    state = OptimizerState.initial(p.theta0, spec)
    step(state, p, EnKFSettings(batch_size=8, line_search_data="batch"))
    batches = set(model.calls[:6])
    assert len(batches) == 1 and len(next(iter(batches))) == 8


@pytest.mark.parametrize("direction", ["identity", "kalman", "gauss-newton"])
@pytest.mark.parametrize("problem", ["quadratic", "oscillatory"])
def test_armijo_monotone(direction, problem):
    p = make_quadratic(seed=0) if problem == "quadratic" else make_oscillatory(m=60, n=30, seed=0)
    spec = PerturbationSpec(p.dimension, 5, 0.1, seed=4)
    trace = run(p, EnKFSettings(direction=direction), spec, 60)
    obj = trace.column("objective")
    assert np.all(np.diff(obj) <= 0)


def test_full_basis_identity_is_preconditioned_gradient():
    p = make_quadratic(seed=5)
    n = p.dimension
    theta = np.random.default_rng(1).standard_normal(n)
    omega = 0.1 * np.linalg.qr(np.random.default_rng(2).standard_normal((n, n)))[0]
    q, center = build_delta_matrix(p.model, theta, omega)
    d = -omega @ (q.T @ p.loss.gradient(center))
    expected = -omega @ omega.T @ p.gradient(theta)
    np.testing.assert_allclose(d, expected, rtol=1e-9, atol=1e-12)


def test_descent_direction_property():
    # grad phi . d = -(J Omega)^T g . Q^T g, and Q = J Omega + O(sigma^2)
    p = make_oscillatory(m=60, n=30, seed=1)
    rng = np.random.default_rng(0)
    spec = PerturbationSpec(30, 6, 1e-4, seed=9)
    stream = make_stream(9)
    for _ in range(10):
        theta = rng.standard_normal(30)
        omega = draw_perturbations(spec, stream)
        q, center = build_delta_matrix(p.model, theta, omega)
        g = p.loss.gradient(center)
        d = -omega @ (q.T @ g)
        assert p.gradient(theta) @ d <= -0.5 * np.linalg.norm(q.T @ g) ** 2


def test_eval_buffer_evicts_oldest_first():
    buf = EvalBuffer(5)
    for i in range(4):
        buf.extend(np.full((2, 2), i), np.full((3, 2), 10 + i))
    omega, q = buf.matrices()
    assert omega.shape == (2, 5) and q.shape == (3, 5)
    np.testing.assert_array_equal(omega[0], [1, 2, 2, 3, 3])
    np.testing.assert_array_equal(q[0], [11, 12, 12, 13, 13])


def test_memory_first_step_equals_plain_step():
    p = make_oscillatory(m=50, n=20, seed=2)
    spec = PerturbationSpec(20, 4, 0.2, seed=1)
    plain, rec_a = step(OptimizerState.initial(p.theta0, spec), p, EnKFSettings())
    mem, buf, rec_b = step_with_memory(OptimizerState.initial(p.theta0, spec), EvalBuffer(20), p,
                                       EnKFSettings())
    np.testing.assert_array_equal(plain.theta, mem.theta)
    assert len(buf) == 4


def test_memory_equal_to_k_is_plain_algorithm():
    p = make_oscillatory(m=50, n=20, seed=2)
    spec = PerturbationSpec(20, 4, 0.2, seed=1)
    a = run(p, EnKFSettings(), spec, 25)
    b = run(p, EnKFSettings(memory=4), spec, 25)
    np.testing.assert_array_equal(a.column("objective"), b.column("objective"))
    np.testing.assert_array_equal(a.meta["theta"], b.meta["theta"])


def test_memory_fresh_evaluations_only():
    p = make_oscillatory(m=50, n=20, seed=2)
    spec = PerturbationSpec(20, 4, 0.2, seed=1)
    trace = run(p, EnKFSettings(memory=20), spec, 10)
    trials = trace.column("trials")
    evals = trace.column("fwd_evals")
    np.testing.assert_array_equal(np.diff(evals), 5 + trials[1:])


def test_run_zero_iterations():
    p = make_quadratic()
    trace = run(p, EnKFSettings(), PerturbationSpec(20, 3, 0.1), 0)
    assert len(trace) == 1 and trace.records[0].iter == 0 and trace.records[0].fwd_evals == 0


def test_run_reduces_distance_on_quadratic():
    p = make_quadratic(seed=0)
    trace = run(p, EnKFSettings(), PerturbationSpec(20, 10, 0.05, seed=2), 200)
    d = trace.column("dist_to_opt")
    assert d[-1] < d[0]
    assert np.all(np.diff(trace.column("iter")) == 1)


def test_theoretical_schedule_uses_problem_L():
    p = make_quadratic(seed=0)
    spec = PerturbationSpec(20, 10, 0.05, seed=2)
    trace = run(p, EnKFSettings(step_rule=TheoreticalSchedule()), spec, 3)
    mu = trace.column("step_size")[1:]
    expected = [1.0 / (j * p.strong_convexity * 10 * 0.05**2) for j in (1, 2, 3)]
    np.testing.assert_allclose(mu, expected)


def test_theoretical_schedule_requires_L():
    p = make_oscillatory(m=20, n=10)
    with pytest.raises(RunFailed) as info:
        run(p, EnKFSettings(step_rule=TheoreticalSchedule()), PerturbationSpec(10, 2, 0.1), 2)
    assert isinstance(info.value.cause, ConfigError)


def test_failure_preserves_partial_trace():
    base = make_quadratic(seed=0)
    p = Problem(FlakyModel(base.model, after=40), LeastSquaresLoss(), base.theta0)
    with pytest.raises(RunFailed) as info:
        run(p, EnKFSettings(step_rule=ArmijoParams(max_trials=3)), PerturbationSpec(20, 5, 0.1), 50)
    partial = info.value.trace
    assert 1 <= len(partial) < 51
    assert isinstance(info.value.cause, ParticleEvaluationError)


def test_memory_with_batch_rejected():
    with pytest.raises(ConfigError):
        EnKFSettings(memory=10, batch_size=4)


def test_objective_tolerance_stops_early():
    p = make_quadratic(seed=0)
    tol = p.objective(p.theta_star) * 1.5
    trace = run(p, EnKFSettings(objective_tol=tol), PerturbationSpec(20, 10, 0.05, seed=0), 5000)
    assert trace.meta["stop_reason"] == "objective_tol"
    assert trace.records[-1].objective <= tol and len(trace) < 5001


def test_worker_count_does_not_change_results():
    p = make_oscillatory(m=80, n=30, seed=0)
    spec = PerturbationSpec(30, 6, 0.1, seed=5)
    with ParticleScheduler(1) as s1, ParticleScheduler(4) as s4:
        a = run(p, EnKFSettings(direction="kalman"), spec, 20, s1)
        b = run(p, EnKFSettings(direction="kalman"), spec, 20, s4)
    assert a.column("objective").tobytes() == b.column("objective").tobytes()
    assert a.meta["theta"].tobytes() == b.meta["theta"].tobytes()

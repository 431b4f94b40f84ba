import time

import numpy as np
import pytest

from enkfopt.errors import ConfigError, ParticleEvaluationError
from enkfopt.optimizer import build_delta_matrix
from enkfopt.parallel import ParticleScheduler, schedule_particle_evaluations
from enkfopt.problems import ForwardModel, make_oscillatory


def test_serial_budget_matches_parallel():
    tasks = [lambda i=i: i * i for i in range(25)]
    assert schedule_particle_evaluations(tasks, 1) == schedule_particle_evaluations(tasks, 8)


def test_results_in_index_order():
    def slow(i):
        time.sleep(0.001 * (25 - i))
        return i

    with ParticleScheduler(8) as s:
        assert s.map(slow, range(25)) == list(range(25))


def test_failure_reports_task_label():
    def f(i):
        if i == 3:
            raise ValueError("boom")
        return i

    for workers in (1, 4):
        with pytest.raises(ParticleEvaluationError) as info:
            schedule_particle_evaluations([lambda i=i: f(i) for i in range(6)], workers)
        assert info.value.particle == 3


def test_invalid_budget():
    with pytest.raises(ConfigError):
        ParticleScheduler(0)


class Delayed(ForwardModel):
    def __init__(self, inner, delay):
        self.inner, self.delay = inner, delay
        self.input_dim, self.n_examples = inner.input_dim, inner.n_examples

    def evaluate(self, theta, batch=None):
        time.sleep(self.delay)
        return self.inner.evaluate(theta, batch)


def test_parallel_wall_time_is_lower_with_delay():
    p = make_oscillatory(m=300, n=200, seed=0)
    model = Delayed(p.model, 0.001)
    omega = 0.1 * np.random.default_rng(0).standard_normal((200, 24))
    theta = np.zeros(200)
    timings = {}
    results = {}
    for workers in (1, 8):
        with ParticleScheduler(workers) as s:
            best = np.inf
            for _ in range(3):
                t0 = time.perf_counter()
                results[workers] = build_delta_matrix(model, theta, omega, scheduler=s)[0]
                best = min(best, time.perf_counter() - t0)
        timings[workers] = best
    assert timings[8] < timings[1]
    assert results[1].tobytes() == results[8].tobytes()

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enkfopt.errors import CapabilityError, NumericError, ShapeError
from enkfopt.problems import (ForwardModel, LeastSquaresLoss, LinearModel, OscillatoryModel, Problem,
                              SoftmaxCrossEntropy, analytic_phi_gradient, evaluate, loss, loss_gradient,
                              make_oscillatory, make_quadratic)

from conftest import central_difference, rel_err


def test_identity_linear_model():
    model = LinearModel(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(evaluate(model, np.array([1.0, 2.0])), [1.0, 2.0])


def test_oscillatory_at_zero_is_zero():
    p = make_oscillatory(m=30, n=20, seed=3)
    np.testing.assert_array_equal(p.model.evaluate(np.zeros(20)), np.zeros(30))


def test_oscillatory_matches_scalar_loop():
    p = make_oscillatory(m=300, n=200, frequency=20, amplitude=1, seed=1)
    A, B = p.model.A, p.model.B
    theta = np.random.default_rng(5).standard_normal(200)
    expected = np.empty(300)
    for i in range(300):
        a = sum(A[i, j] * theta[j] for j in range(200))
        b = sum(B[i, j] * theta[j] for j in range(200))
        expected[i] = a + 1.0 * math.sin(20.0 * b)
    np.testing.assert_allclose(p.model.evaluate(theta), expected, rtol=1e-10, atol=1e-9)


def test_least_squares_values():
    ls = LeastSquaresLoss()
    assert loss(ls, np.array([3.0, 4.0])) == 12.5
    assert loss(ls, np.zeros(3)) == 0.0
    np.testing.assert_array_equal(loss_gradient(ls, np.array([3.0, 4.0])), [3.0, 4.0])
    target = LeastSquaresLoss(np.array([1.0, 1.0]))
    np.testing.assert_array_equal(target.gradient(np.array([3.0, 4.0])), [2.0, 3.0])


def test_least_squares_rejects_non_finite():
    with pytest.raises(NumericError):
        LeastSquaresLoss().loss(np.array([1.0, np.nan]))


@pytest.mark.parametrize("c", [2, 4, 10])
def test_cross_entropy_uniform_logits(c):
    ce = SoftmaxCrossEntropy(labels=np.array([0, c - 1, 1]), n_classes=c)
    assert ce.loss(np.zeros(3 * c)) == pytest.approx(math.log(c))


def test_cross_entropy_gradient_identities():
    ce = SoftmaxCrossEntropy(labels=np.array([1]), n_classes=3)
    np.testing.assert_allclose(ce.gradient(np.zeros(3)), np.full(3, 1 / 3) - np.array([0, 1, 0]))
    confident = np.array([-50.0, 50.0, -50.0])
    assert np.abs(ce.gradient(confident)).max() < 1e-30


def test_least_squares_gradient_matches_fd():
    rng = np.random.default_rng(0)
    t, d = rng.standard_normal(300), rng.standard_normal(300)
    ls = LeastSquaresLoss(d)
    fd = central_difference(ls.loss, t, h=1e-5)
    assert rel_err(ls.gradient(t), fd) <= 1e-6


def test_cross_entropy_gradient_matches_fd():
    rng = np.random.default_rng(1)
    ce = SoftmaxCrossEntropy(rng.integers(0, 5, size=60), 5)
    t = rng.standard_normal(300)
    assert rel_err(ce.gradient(t), central_difference(ce.loss, t)) <= 1e-6


def test_quadratic_gradient_vanishes_at_solution():
    p = make_quadratic(seed=2)
    A, b = p.model.A, p.model.b
    theta = np.random.default_rng(0).standard_normal(p.dimension)
    np.testing.assert_allclose(analytic_phi_gradient(p, theta), A.T @ (A @ theta - b), atol=1e-12)
    assert np.linalg.norm(p.gradient(p.theta_star)) < 1e-10


def test_oscillatory_gradient_formula_at_zero():
    p = make_oscillatory(m=40, n=25, frequency=20, amplitude=1, seed=4)
    A, B = p.model.A, p.model.B
    d = p.loss.target
    expected = (A.T + 1.0 * 20.0 * B.T) @ (-d)
    np.testing.assert_allclose(analytic_phi_gradient(p, np.zeros(25)), expected, rtol=1e-12)


@pytest.mark.parametrize("maker", [lambda: make_quadratic(seed=1),
                                   lambda: make_oscillatory(m=40, n=25, seed=2)])
def test_phi_gradient_matches_fd(maker):
    p = maker()
    theta = 0.1 * np.random.default_rng(3).standard_normal(p.dimension)
    fd = central_difference(p.objective, theta, h=1e-6)
    assert rel_err(p.gradient(theta), fd) <= 1e-5


def test_capability_error_without_vjp():
    class Opaque(ForwardModel):
        input_dim, n_examples = 2, 2

        def evaluate(self, theta, batch=None):
            return np.asarray(theta)

    p = Problem(Opaque(), LeastSquaresLoss(), np.zeros(2))
    with pytest.raises(CapabilityError):
        p.gradient(np.zeros(2))


def test_shape_errors():
    model = LinearModel(np.eye(3))
    with pytest.raises(ShapeError):
        model.evaluate(np.zeros(2))
    with pytest.raises(ShapeError):
        model.evaluate(np.zeros(3), batch=[5])


def test_quadratic_conditioning_and_L():
    p = make_quadratic(m=30, n=20, condition=10, seed=0)
    eig = np.linalg.eigvalsh(p.model.A.T @ p.model.A)
    assert eig[-1] / eig[0] == pytest.approx(10, rel=1e-8)
    assert p.strong_convexity == pytest.approx(eig[0])


def test_oscillatory_truth_is_zero_misfit():
    p = make_oscillatory(m=50, n=30, seed=0)
    assert p.objective(p.theta_star) == 0.0
    assert p.distance(p.theta0) == pytest.approx(np.linalg.norm(p.theta_star))


def test_matrix_scale_option():
    unit = make_oscillatory(m=20, n=16, seed=0)
    norm = make_oscillatory(m=20, n=16, seed=0, matrix_scale="normalized")
    np.testing.assert_allclose(norm.model.A, unit.model.A / 4.0)
    with pytest.raises(ValueError):
        make_oscillatory(matrix_scale="bogus")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 100.0))
def test_oscillation_bounded_by_amplitude(seed, scale):
    p = make_oscillatory(m=30, n=10, amplitude=0.7, seed=0)
    theta = scale * np.random.default_rng(seed).standard_normal(10)
    assert np.abs(p.model.evaluate(theta) - p.model.A @ theta).max() <= 0.7 + 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_purity_and_batch_consistency(seed):
    p = make_oscillatory(m=30, n=10, seed=1)
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(10)
    full = p.model.evaluate(theta)
    assert full.tobytes() == p.model.evaluate(theta).tobytes()
    batch = np.sort(rng.choice(30, size=7, replace=False))
    per_example = np.concatenate([p.model.evaluate(theta, [i]) for i in batch])
    # row subsets may change BLAS summation order
    np.testing.assert_allclose(p.model.evaluate(theta, batch), per_example, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(full[batch], per_example, rtol=1e-12, atol=1e-12)


def test_oscillatory_jacobian_matches_fd():
    p = make_oscillatory(m=12, n=6, seed=3)
    theta = 0.1 * np.random.default_rng(1).standard_normal(6)
    J = p.model.jacobian(theta)
    for i in range(12):
        fd = central_difference(lambda t: p.model.evaluate(t)[i], theta, h=1e-6)
        np.testing.assert_allclose(J[i], fd, rtol=1e-5, atol=1e-6)
    assert isinstance(p.model, OscillatoryModel)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enkfopt.errors import ConfigError
from enkfopt.sampler import (BATCH_STREAM, PERTURBATION_STREAM, Distribution, PerturbationSpec,
                             draw_perturbations, empirical_moments, make_stream,
                             moment_tolerances)


def test_rademacher_support_is_plus_minus_sigma():
    spec = PerturbationSpec(3, 2, 0.1, "rademacher", seed=7)
    omega = draw_perturbations(spec, make_stream(7))
    assert omega.shape == (3, 2)
    assert set(np.unique(omega)) <= {0.1, -0.1}


def test_oscillatory_sized_draw():
    spec = PerturbationSpec(200, 5, 0.3, seed=0)
    omega = draw_perturbations(spec, make_stream(0))
    assert omega.shape == (200, 5)
    assert np.all(np.isfinite(omega))


def test_gaussian_covariance_large_k():
    # empirical max-entry deviation for this seed is about 0.010
    spec = PerturbationSpec(10, 50_000, 1.0, "gaussian", seed=1)
    _, cov = empirical_moments(draw_perturbations(spec, make_stream(1)))
    assert np.abs(cov - np.eye(10)).max() <= 0.05


@pytest.mark.parametrize("n,k,sigma", [(0, 2, 1.0), (3, 0, 1.0), (3, 2, 0.0), (3, 2, -1.0)])
def test_invalid_spec_rejected(n, k, sigma):
    with pytest.raises(ConfigError):
        PerturbationSpec(n, k, sigma)


def test_unknown_distribution_rejected():
    with pytest.raises(ValueError):
        PerturbationSpec(3, 2, 1.0, "uniform")


def test_same_seed_is_bit_identical():
    spec = PerturbationSpec(50, 7, 0.2, seed=99)
    a = draw_perturbations(spec, make_stream(99))
    b = draw_perturbations(spec, make_stream(99))
    assert a.tobytes() == b.tobytes()


def test_stream_advances_and_streams_are_independent():
    spec = PerturbationSpec(5, 3, 1.0, seed=1)
    s = make_stream(1)
    a, b = draw_perturbations(spec, s), draw_perturbations(spec, s)
    assert not np.array_equal(a, b)
    other = draw_perturbations(spec, make_stream(1, BATCH_STREAM))
    assert not np.array_equal(a, other)
    assert PERTURBATION_STREAM != BATCH_STREAM


def test_leading_columns_do_not_depend_on_k():
    a = draw_perturbations(PerturbationSpec(6, 3, 1.0), make_stream(4))
    b = draw_perturbations(PerturbationSpec(6, 5, 1.0), make_stream(4))
    np.testing.assert_array_equal(a, b[:, :3])


def test_sigma_override_and_decay():
    spec = PerturbationSpec(4, 2, 1.0, decay=0.5)
    assert spec.sigma_at(0) == 1.0 and spec.sigma_at(3) == 0.125
    a = draw_perturbations(spec, make_stream(0))
    b = draw_perturbations(spec, make_stream(0), sigma=0.25)
    np.testing.assert_allclose(b, 0.25 * a)


def test_moments_single_column():
    s = 0.3
    col = np.array([[s], [-s]])
    mean, cov = empirical_moments(col)
    np.testing.assert_allclose(mean, [s, -s])
    np.testing.assert_allclose(cov, col @ col.T)


def test_moments_zero_matrix():
    mean, cov = empirical_moments(np.zeros((4, 3)))
    assert not mean.any() and not cov.any()


@pytest.mark.parametrize("dist", list(Distribution))
def test_moment_property_statistical(dist):
    # R = 1000 draws of k = 100 columns: kR = 1e5
    n, k, R, sigma = 8, 100, 1000, 0.7
    spec = PerturbationSpec(n, k, sigma, dist, seed=2024)
    stream = make_stream(2024)
    total_mean = np.zeros(n)
    total_cov = np.zeros((n, n))
    for _ in range(R):
        omega = draw_perturbations(spec, stream)
        total_mean += omega.sum(axis=1)
        total_cov += omega @ omega.T
    kR = k * R
    mean_tol, cov_tol = moment_tolerances(n, sigma, kR)
    assert np.linalg.norm(total_mean / kR) <= mean_tol
    assert np.abs(total_cov / kR - sigma**2 * np.eye(n)).max() <= cov_tol


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 20), k=st.integers(1, 8), sigma=st.floats(1e-3, 10.0),
       seed=st.integers(0, 2**64 - 1), dist=st.sampled_from(["gaussian", "rademacher"]))
def test_draw_shape_finiteness_and_determinism(n, k, sigma, seed, dist):
    spec = PerturbationSpec(n, k, sigma, dist, seed)
    a = draw_perturbations(spec, make_stream(seed))
    assert a.shape == (n, k) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, draw_perturbations(spec, make_stream(seed)))
    if dist == "rademacher":
        np.testing.assert_allclose(np.abs(a), sigma)

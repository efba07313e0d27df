import numpy as np
import pytest
from scipy.special import gammaln, logsumexp

from tweedenoise import (
    DomainError,
    GmmPrior,
    ModelKind,
    NoiseModel,
    QuadratureError,
    ScoreField,
    analytic_score_gaussian,
    geometric_schedule,
    numeric_marginal_score,
)

P2 = GmmPrior((0.5, 0.5), (0.3, 0.9), (0.02, 0.02))


def point_prior(x0, std=1e-9):
    return GmmPrior((1.0,), (x0,), (std,))


def test_score_field_rejects_nonfinite():
    with pytest.raises(DomainError):
        ScoreField(np.array([0.0, np.nan]))
    f = ScoreField([1.0, 2.0], backend="x")
    assert f.values.dtype == np.float64


# ---------------------------------------------------------------------------
# gaussian oracle

def test_single_component_score_is_linear():
    # one near-point component: score = (m - y) / (sigma^2 + s^2)
    got = analytic_score_gaussian(0.7, point_prior(0.5), sigma=0.2)
    np.testing.assert_allclose(got.values, -5.0, rtol=1e-9)
    assert got.backend == "oracle-gaussian"


def test_score_vanishes_at_symmetry_point():
    got = analytic_score_gaussian(0.6, P2, sigma=0.1)
    assert abs(float(got.values)) <= 1e-12


def test_gaussian_score_matches_finite_difference_of_marginal():
    sigma = 25.0 / 255.0
    y = np.linspace(0.15, 1.05, 301)
    got = analytic_score_gaussian(y, P2, sigma).values

    def logmarg(t):
        v = np.asarray(P2.stds) ** 2 + sigma**2
        terms = (
            np.log(P2.weights)
            - 0.5 * np.log(2 * np.pi * v)
            - (t[:, None] - np.asarray(P2.means)) ** 2 / (2 * v)
        )
        return logsumexp(terms, axis=1)

    h = 1e-5
    fd = (logmarg(y + h) - logmarg(y - h)) / (2 * h)
    assert np.max(np.abs(got - fd)) <= 1e-6


def test_gaussian_oracle_rejects_bad_sigma():
    with pytest.raises(DomainError):
        analytic_score_gaussian(0.5, P2, sigma=0.0)


# ---------------------------------------------------------------------------
# quadrature oracle

def test_gamma_point_prior_closed_form():
    # E[1/x | y] collapses to 1/x0, so l'(y) = (k-1)/y - k/x0
    k, x0 = 80.0, 0.6
    y = np.linspace(0.3, 1.0, 64)
    got = numeric_marginal_score(y, point_prior(x0), NoiseModel(ModelKind.GAMMA, k))
    np.testing.assert_allclose(got.values, (k - 1.0) / y - k / x0, rtol=1e-9)
    assert got.backend == "oracle-quadrature"


def test_poisson_point_prior_matches_finite_difference():
    zeta, x0 = 0.02, 0.5
    y = np.linspace(0.2, 0.9, 41)

    def loglik(t):
        n = t / zeta
        return n * np.log(x0 / zeta) - x0 / zeta - gammaln(n + 1.0)

    h = 1e-5
    fd = (loglik(y + h) - loglik(y - h)) / (2 * h)
    got = numeric_marginal_score(y, point_prior(x0), NoiseModel(ModelKind.POISSON, zeta))
    assert np.max(np.abs(got.values - fd)) <= 1e-6


def test_quadrature_self_convergence_on_narrow_priors():
    """Doubling the order moves the score by < 1e-8 on sd-0.02 mixtures."""
    p58 = GmmPrior((0.5, 0.5), (0.5, 0.8), (0.02, 0.02))
    y = np.linspace(0.3, 1.1, 400)
    cases = [
        NoiseModel(ModelKind.POISSON, 0.05),
        NoiseModel(ModelKind.POISSON, 0.01),
        NoiseModel(ModelKind.GAMMA, 100.0),
        NoiseModel(ModelKind.GAMMA, 40.0),
    ]
    for model in cases:
        a = numeric_marginal_score(y, p58, model, order=48, check=False).values
        b = numeric_marginal_score(y, p58, model, order=96, check=False).values
        assert np.max(np.abs(a - b)) <= 1e-8, model


def test_unconverged_quadrature_fails_loudly():
    # wide prior + tiny zeta: in the far left tail the posterior runs off
    # the node range and the built-in doubling check must catch it
    wide = GmmPrior((0.5, 0.5), (0.44, 0.66), (0.08, 0.08))
    y = np.arange(2, 111) * 0.01
    with pytest.raises(QuadratureError, match="not converged"):
        numeric_marginal_score(y, wide, NoiseModel(ModelKind.POISSON, 0.01))
    # a finer rule converges
    f = numeric_marginal_score(y, wide, NoiseModel(ModelKind.POISSON, 0.01), order=128)
    assert np.all(np.isfinite(f.values))


def test_quadrature_domain_checks():
    with pytest.raises(DomainError):
        numeric_marginal_score(1e-6, point_prior(0.5), NoiseModel(ModelKind.POISSON, 0.02))
    with pytest.raises(DomainError):
        numeric_marginal_score(0.5, point_prior(0.5), NoiseModel(ModelKind.GAUSSIAN, 0.01))


# ---------------------------------------------------------------------------
# schedules

def test_geometric_schedule_values():
    np.testing.assert_allclose(geometric_schedule(0.1, 0.001, 3), [0.1, 0.01, 0.001])
    seq = geometric_schedule(0.05, 0.01, 5)
    assert seq[0] == 0.05 and seq[-1] == 0.01  # endpoints exact
    np.testing.assert_allclose(np.diff(np.log(seq)), np.log(0.2) / 4)
    same = geometric_schedule(0.03, 0.03, 4)
    np.testing.assert_array_equal(same, np.full(4, 0.03))


def test_geometric_schedule_errors():
    with pytest.raises(DomainError):
        geometric_schedule(0.1, 0.001, 1)
    with pytest.raises(DomainError):
        geometric_schedule(0.001, 0.1, 5)
    with pytest.raises(DomainError):
        geometric_schedule(0.1, 0.0, 5)

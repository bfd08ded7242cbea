import math

import numpy as np
import pytest
from scipy import integrate, stats

from auxmix.model import PoissonLGM, RandomEffectBlock
from auxmix.oracle import ExactPosterior, GridPosterior, grid_posterior_1d, grid_posterior_2d, rwmh_reference
from auxmix.samplers import SamplerConfig


@pytest.fixture(scope="module")
def intercept_model():
    y = np.random.default_rng(5).poisson(2.5, 20)
    return PoissonLGM(y=y, X=np.ones((20, 1)), V0=np.array([[100.0]]))


def test_grid_posterior_of_a_gaussian():
    x = np.linspace(-15, 17, 6401)
    gp = GridPosterior.from_log_density(x, -0.5 * (x - 1.0) ** 2 / 4.0)
    assert gp.mean == pytest.approx(1.0, abs=1e-9)
    assert gp.sd == pytest.approx(2.0, rel=1e-6)
    assert gp.cdf(1.0) == pytest.approx(0.5, abs=1e-9)
    assert gp.quantile(0.975) == pytest.approx(1.0 + 2.0 * stats.norm.ppf(0.975), abs=1e-4)


def test_grid_1d_against_adaptive_quadrature(intercept_model):
    m = intercept_model
    gp = grid_posterior_1d(m)
    S, n = m.y.sum(), m.n

    def post(mu):
        return math.exp(S * mu - n * math.exp(mu) - 0.5 * mu * mu / 100.0 - (S * gp.mode - n * math.exp(gp.mode)))

    lo, hi = gp.grid[0], gp.grid[-1]
    z, _ = integrate.quad(post, lo, hi, epsabs=0, epsrel=1e-12)
    m1, _ = integrate.quad(lambda u: u * post(u), lo, hi, epsabs=0, epsrel=1e-12)
    m2, _ = integrate.quad(lambda u: u * u * post(u), lo, hi, epsabs=0, epsrel=1e-12)
    assert gp.mean == pytest.approx(m1 / z, abs=1e-8)
    assert gp.sd == pytest.approx(math.sqrt(m2 / z - (m1 / z) ** 2), rel=1e-6)


def test_grid_2d_marginal_matches_1d_when_covariate_is_null(intercept_model):
    m = intercept_model
    X = np.column_stack([np.ones(m.n), np.zeros(m.n)])
    m2 = PoissonLGM(y=m.y, X=X, V0=np.diag([100.0, 1.0]))
    g0, g1 = grid_posterior_2d(m2, resolution=801)
    ref = grid_posterior_1d(m)
    assert g0.mean == pytest.approx(ref.mean, abs=1e-6)
    assert g0.sd == pytest.approx(ref.sd, rel=1e-4)
    # the null coefficient keeps its N(0, 1) prior
    assert g1.mean == pytest.approx(0.0, abs=1e-8) and g1.sd == pytest.approx(1.0, rel=1e-4)


def test_grid_2d_shape_checks(intercept_model):
    with pytest.raises(ValueError):
        grid_posterior_2d(intercept_model)


def test_exact_posterior_includes_jacobian():
    """Differences in log sigma2 must follow N(gamma; 0, s2) * InvGamma(s2) * s2 (the Jacobian)."""
    model = PoissonLGM(y=np.array([1, 0, 2]), X=np.ones((3, 1)), blocks=(RandomEffectBlock(np.eye(3), np.eye(3)),))
    post = ExactPosterior(model)
    assert post.dim == 5
    gamma = np.array([0.2, -0.1, 0.0])

    def reference(s2):
        return (stats.norm.logpdf(gamma, 0, np.sqrt(s2)).sum()
                + stats.invgamma.logpdf(s2, 1.0, scale=0.001) + np.log(s2))

    a = np.concatenate([[0.1], gamma, [np.log(0.5)]])
    b = np.concatenate([[0.1], gamma, [np.log(2.0)]])
    assert post(b) - post(a) == pytest.approx(reference(2.0) - reference(0.5), abs=1e-10)
    np.testing.assert_allclose(post.to_natural(b)[-1], 2.0)


def test_rwmh_matches_grid(intercept_model):
    cfg = SamplerConfig(iterations=42000, burn_in=2000, thinning=2, seed=9)
    out = rwmh_reference(intercept_model, cfg)
    gp = grid_posterior_1d(intercept_model)
    draws = out.column("beta0")
    assert stats.kstest(draws, gp.cdf).statistic < 0.03
    assert 0.2 < out.acceptance_rate("joint") < 0.7


def test_rwmh_dimension_cap():
    Z = np.eye(60)
    model = PoissonLGM(y=np.zeros(60), X=np.ones((60, 1)), blocks=(RandomEffectBlock(Z, np.eye(60)),))
    with pytest.raises(ValueError):
        rwmh_reference(model, SamplerConfig(iterations=10, burn_in=5))

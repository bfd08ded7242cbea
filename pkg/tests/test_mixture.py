import numpy as np
import pytest
from scipy import stats

from auxmix.mixture import (
    FitConfig,
    GaussianMixture,
    MixtureBank,
    N_TAIL_COMPONENTS,
    build_adjusted_mixture,
    central_log_error,
    compute_tail_thresholds,
    default_components,
    dump_mixture,
    fit_mixture,
    load_mixture,
    log_gap,
    mixture_log_density,
    moment_matched,
    tail_knots,
)
from auxmix.nlg import NLGShape, nlg_isf, nlg_log_density, nlg_moments, nlg_quantile


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.4], [0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.5], [0.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        GaussianMixture([], [], [])


def test_mixture_density_matches_scipy():
    mix = GaussianMixture([0.3, 0.7], [-1.0, 2.0], [0.5, 2.0])
    z = np.linspace(-5, 6, 23)
    ref = np.log(0.3 * stats.norm.pdf(z, -1, np.sqrt(0.5)) + 0.7 * stats.norm.pdf(z, 2, np.sqrt(2.0)))
    np.testing.assert_allclose(mixture_log_density(mix, z), ref, rtol=1e-12)
    with pytest.raises(ValueError):
        mixture_log_density(mix, [np.inf])


def test_component_schedule():
    assert [default_components(v) for v in (1, 10, 10.5, 100, 101, 1e4, 2e4)] == [10, 10, 7, 7, 4, 4, 1]


def test_moment_matched_for_large_shape():
    mix = moment_matched(NLGShape(5e4))
    m, v = nlg_moments(5e4)
    assert mix.K == 1 and mix.means[0] == m and mix.variances[0] == v


@pytest.fixture(scope="module")
def nu1(bank):
    mix = bank.base(1.0)
    return mix, bank.thresholds(1.0), bank.adjusted(1.0)


def test_fit_nu1_central_accuracy(nu1):
    mix, _, _ = nu1
    assert mix.K == 10
    assert abs(mix.weights.sum() - 1) < 1e-12
    assert central_log_error(mix) <= 0.05


def test_fit_is_deterministic():
    a = fit_mixture(NLGShape(3.0), 4, FitConfig(n_starts=2, em_iterations=40, max_iterations=100))
    b = fit_mixture(NLGShape(3.0), 4, FitConfig(n_starts=2, em_iterations=40, max_iterations=100))
    assert a == b


def test_thresholds_bracket_the_mode(nu1):
    mix, th, _ = nu1
    assert th.xi_L < -np.log(1.0) < th.xi_U
    assert not th.upper_open
    # the gap sits at the cut-off level and stays below it between the cut-offs
    assert abs(log_gap(mix, th.xi_U) - 1.0) <= 1e-3
    inner = np.linspace(th.xi_L + 1e-3, th.xi_U - 1e-3, 4001)
    assert np.all(log_gap(mix, inner) <= 1.0 + 1e-9)


def test_open_threshold_when_no_crossing():
    shape = NLGShape(1.0)
    # a mixture equal to f up to quadrature error never crosses inside a short window
    th = compute_tail_thresholds(shape, _dense_fit(), scan_tail=1e-3)
    assert th.upper_open and th.lower_open
    assert th.xi_U == pytest.approx(nlg_isf(1e-3, shape))


def _dense_fit():
    return fit_mixture(NLGShape(1.0), 10)


def test_adjusted_mixture_repair(nu1):
    mix, th, adj = nu1
    assert adj.adjusted and adj.K == mix.K + N_TAIL_COMPONENTS and adj.n_base == mix.K
    knots = tail_knots(1.0, th.xi_U)
    assert knots[0] == th.xi_U and knots.size == N_TAIL_COMPONENTS
    u = np.linspace(th.xi_U, knots[-1], 5001)
    assert np.max(log_gap(adj, u)) <= 1.0
    assert adj.tail_weight < 0.01
    lo, hi = nlg_quantile(0.025, 1.0), nlg_quantile(0.975, 1.0)
    z = np.linspace(lo, hi, 2001)
    assert np.max(np.abs(mixture_log_density(adj, z) - mixture_log_density(mix, z))) <= 0.02


def test_open_upper_threshold_leaves_base_unchanged(nu1):
    from dataclasses import replace
    mix, th, _ = nu1
    assert build_adjusted_mixture(NLGShape(1.0), mix, replace(th, upper_open=True)) is mix


def test_cache_round_trip_is_exact(nu1):
    mix, th, _ = nu1
    text = dump_mixture(mix, th, "abc")
    back, th2, h = load_mixture(text)
    assert h == "abc"
    assert back == mix
    assert th2.xi_U == th.xi_U and th2.xi_L == th.xi_L


def test_bank_persists_and_reloads(tmp_path, nu1):
    mix, th, _ = nu1
    first = MixtureBank(cache_dir=tmp_path)
    first._base[1.0], first._thresholds[1.0] = mix, th
    first._store(first._path(1.0, mix.K), mix, th)
    files = list(tmp_path.glob("nlg_nu1_K10_*.json"))
    assert len(files) == 1
    again = MixtureBank(cache_dir=tmp_path)
    assert again.base(1.0) == mix
    assert again.thresholds(1.0).xi_U == th.xi_U


def test_cache_key_depends_on_fit_config(tmp_path):
    a = MixtureBank(cache_dir=tmp_path)
    b = MixtureBank(config=FitConfig(n_starts=3), cache_dir=tmp_path)
    assert a._path(2.0, 10) != b._path(2.0, 10)


def test_nlg_density_beats_single_gaussian_in_centre(nu1):
    mix, _, _ = nu1
    single = moment_matched(NLGShape(1.0))
    z = np.linspace(nlg_quantile(0.005, 1.0), nlg_quantile(0.995, 1.0), 801)
    f = nlg_log_density(z, NLGShape(1.0))
    assert np.max(np.abs(mixture_log_density(mix, z) - f)) < np.max(np.abs(mixture_log_density(single, z) - f))

import math

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.stats as st_
from hypothesis import given
from hypothesis import strategies as st

from excursets import excursions as ex
from excursets import families as fam
from excursets import gauss_prob as gp
from excursets import gmrf
from excursets import harness as hs


def test_matern_variance_limit():
    # phi^2 Gamma(1) / (4 pi Gamma(2) kappa^2) at kappa^2 = 0.5
    assert hs.matern_cov(0.0, 1.0, 0.5, 1.0) == pytest.approx(1 / (2 * math.pi), rel=1e-12)


def test_matern_half_integer_is_exponential():
    # nu = 1/2 in one dimension reduces to phi^2 / (2 kappa) exp(-kappa h)
    h = np.linspace(0.0, 4.0, 9)
    kappa = 1.7
    np.testing.assert_allclose(hs.matern_cov(h, 0.5, kappa**2, 2.0, d=1), 2.0 / (2 * kappa) * np.exp(-kappa * h),
                               rtol=1e-12)


def test_matern_decreasing_and_linear_in_scale():
    h = np.linspace(0.0, 10.0, 201)
    c = hs.matern_cov(h, 1.0, 0.5, 1.0)
    assert np.all(np.diff(c) < 0)
    np.testing.assert_allclose(hs.matern_cov(h, 1.0, 0.5, 2.0), 2 * c, rtol=1e-14)


def test_matern_rejects_bad_input():
    with pytest.raises(ValueError):
        hs.matern_cov(-1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        hs.matern_cov(1.0, 0.0, 1.0, 1.0)


def test_example1_interpolation_limit():
    spec = hs.SimSpec("ex1", grid=50, n_obs=30, sigma=1e-6, seed=3)
    first = hs.simulate_example1(spec)
    sim = hs.simulate_example1(spec, locations=first.obs_locations)
    np.testing.assert_allclose(sim.posterior.mean, sim.y, atol=1e-3)


def test_example1_without_data_is_prior():
    spec = hs.SimSpec("ex1", grid=40, n_obs=0, sigma=0.1)
    sim = hs.simulate_example1(spec)
    s = sim.locations
    np.testing.assert_allclose(sim.posterior.mean, hs.example1_mean(s))
    np.testing.assert_allclose(sim.posterior.covariance, np.exp(-np.abs(s[:, None] - s[None, :])))


def test_example1_prior_variance_scales_covariance():
    spec = hs.SimSpec("ex1", grid=30, n_obs=0, sigma=0.1, variance=0.01)
    sim = hs.simulate_example1(spec)
    s = sim.locations
    np.testing.assert_allclose(sim.posterior.covariance, 0.01 * np.exp(-np.abs(s[:, None] - s[None, :])))


def test_example1_conditioning_reduces_variance():
    sim = hs.simulate_example1(hs.SimSpec("ex1", grid=200, n_obs=50, sigma=0.1, seed=1))
    assert np.all(np.diag(sim.posterior.covariance) <= 1.0 + 1e-12)
    assert np.diag(sim.posterior.covariance).max() < 1.0


def test_example1_mean_is_piecewise_linear():
    np.testing.assert_allclose(hs.example1_mean([0.0, 0.5, 1.0, 1.5, 2.0]), [-0.5, 0.0, 0.5, 0.0, -0.5])


@pytest.fixture(scope="module")
def lattice_prior_draws():
    model = hs.LatticeModel(20)
    post = gmrf.GaussianPosterior(np.zeros(model.n), precision=model.precision(2.0, 1.0))
    f = gmrf.cholesky(post, gmrf.fill_reducing_permutation(post))
    return model, gmrf.sample(post, f, np.random.default_rng(8), size=20_000)


def test_lattice_calibration_at_centre():
    model = hs.LatticeModel(15)
    post = gmrf.GaussianPosterior(np.zeros(model.n), precision=model.precision(0.5, 1.0))
    var = gmrf.marginal_variances(post)
    assert var[model.centre] == pytest.approx(hs.matern_cov(0.0, 1.0, 0.5, 1.0), rel=1e-10)


def test_lattice_prior_variance_within_ten_percent(lattice_prior_draws):
    model, X = lattice_prior_draws
    interior = [model.centre, model.centre - 1, model.centre + model.shape[1], model.centre - 2 * model.shape[1]]
    target = hs.matern_cov(0.0, 1.0, 2.0, 1.0)
    assert np.all(np.abs(X[:, interior].var(axis=0) / target - 1) <= 0.10)


def test_lattice_lag_one_correlation_within_ten_percent(lattice_prior_draws):
    model, X = lattice_prior_draws
    c = model.centre
    corr = np.corrcoef(X[:, c], X[:, c + 1])[0, 1]
    target = hs.matern_cov(model.spacing, 1.0, 2.0, 1.0) / hs.matern_cov(0.0, 1.0, 2.0, 1.0)
    assert abs(corr / target - 1) <= 0.10


def _small_sim(grid=6, n_obs=40, seed=0):
    return hs.simulate_example2_3(hs.SimSpec("ex3", grid=grid, n_obs=n_obs, sigma=0.5, kappa2=2.0, seed=seed))


def test_likelihood_matches_dense_marginal_density():
    sim = _small_sim()
    theta = np.array([-0.5, 0.2, 0.1])
    sigma, kappa, phi = np.exp(theta)
    Q = sim.model.precision(kappa**2, phi**2).toarray()
    A = sim.A.toarray()
    Sy = A @ np.linalg.inv(Q) @ A.T + sigma**2 * np.eye(A.shape[0])
    ref = st_.multivariate_normal(np.zeros(A.shape[0]), Sy).logpdf(sim.y)
    assert sim.log_likelihood(theta) == pytest.approx(ref, rel=1e-9)


def test_conditional_posterior_matches_dense_formula():
    sim = _small_sim()
    theta = np.array([-0.7, 0.3, 0.0])
    sigma = math.exp(theta[0])
    post = sim.posterior(theta)
    Q = sim.model.precision(math.exp(2 * theta[1]), 1.0).toarray()
    A = sim.A.toarray()
    Qh = Q + A.T @ A / sigma**2
    np.testing.assert_allclose(post.precision.toarray(), Qh, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(post.mean, np.linalg.solve(Qh, A.T @ sim.y) / sigma**2, atol=1e-10)


def test_huge_noise_posterior_is_prior():
    sim = _small_sim()
    post = sim.posterior(np.array([25.0, 0.3, 0.0]))
    Q = sim.model.precision(math.exp(0.6), 1.0)
    np.testing.assert_allclose(post.precision.toarray(), Q.toarray(), atol=1e-12)
    np.testing.assert_allclose(post.mean, 0.0, atol=1e-12)


def test_repeated_observations_when_nodes_run_out():
    sim = _small_sim(grid=4, n_obs=40)
    assert sim.obs_nodes.size == 40 and np.unique(sim.obs_nodes).size <= 16


def test_acceptance_probability():
    assert hs.acceptance_probability(-3.0, -3.0) == 1.0
    assert hs.acceptance_probability(-3.0, -4.0) == pytest.approx(math.exp(-1))
    assert hs.acceptance_probability(-3.0, -np.inf) == 0.0


def test_discrete_single_configuration_gives_exact_draws():
    sim = _small_sim(grid=4, n_obs=10)
    prior = hs.GaussianPrior.around(sim.spec.theta_true)
    cs = hs.ni_configs(sim, prior, 1)
    out = hs.mcmc_posterior_draws(sim, prior, 40_000, "discrete", cs, rng=np.random.default_rng(2))
    post = cs.configs[0].posterior
    cov = np.linalg.inv(post.precision.toarray())
    np.testing.assert_allclose(out.draws.mean(0), post.mean, atol=5 * np.sqrt(np.diag(cov) / 40_000).max())
    np.testing.assert_allclose(np.cov(out.draws.T), cov, atol=0.03 * np.abs(cov).max())


def test_full_chain_mean_agrees_with_integrated_posterior():
    sim = _small_sim(grid=6, n_obs=60, seed=4)
    prior = hs.GaussianPrior.around(sim.spec.theta_true)
    mode = hs.find_mode(sim, prior)
    cs = hs.ni_configs(sim, prior, 45, mode)
    ni_mean = cs.weights @ np.stack([c.posterior.mean for c in cs.configs])
    chain = hs.mcmc_posterior_draws(sim, prior, 4000, "full", rng=np.random.default_rng(1), post_mode=mode,
                                    burn_in=500)
    se = hs.batch_means_se(chain.draws)
    assert np.all(np.abs(chain.draws.mean(0) - ni_mean) <= 3 * se + 0.02)
    assert 0.05 < chain.acceptance < 0.9


def test_chain_divergence_is_reported():
    sim = _small_sim(grid=4, n_obs=10)
    prior = hs.GaussianPrior.around(sim.spec.theta_true, 0.01)
    mode = hs.PosteriorMode(sim.spec.theta_true, np.eye(3) * 1e-6, 0.0)
    with pytest.raises(hs.ChainDivergence):
        hs.mcmc_posterior_draws(sim, prior, 3000, "full", post_mode=mode, burn_in=0, thin=5)


def test_design_sizes():
    assert hs.design_points(1).shape == (1, 3)
    ccd = hs.design_points(15)
    assert ccd.shape == (15, 3)
    np.testing.assert_allclose(np.linalg.norm(ccd[1:], axis=1), 1.1 * math.sqrt(3))
    grid = hs.design_points(45)
    assert grid.shape == (45, 3) and len({tuple(r) for r in grid}) == 45
    with pytest.raises(ValueError):
        hs.design_points(0)


def _independent_result(mu, alpha=0.5):
    post = gmrf.GaussianPosterior(np.asarray(mu, float), covariance=np.eye(len(mu)))
    return ex.excursion_one_param(ex.ExcursionProblem(0.0, alpha, config=gp.IntegrationConfig(n_particles=200)), post)


def test_empty_set_is_always_covered():
    r = _independent_result([-3.0, -2.0])
    draws = np.random.default_rng(0).normal(size=(500, 2))
    rep = hs.coverage(r, draws, alphas=[0.01, 0.02])
    np.testing.assert_array_equal(rep.p_hat, [1.0, 1.0])
    np.testing.assert_array_equal(rep.claimed, [1.0, 1.0])


def test_single_node_coverage_recovers_marginal():
    r = _independent_result([1.0, -3.0])
    draws = np.random.default_rng(0).normal([1.0, -3.0], 1.0, size=(20_000, 2))
    rep = hs.coverage(r, draws, alphas=[0.2])
    assert rep.p_hat[0] == pytest.approx(0.8413447, abs=4 * rep.se[0])


def test_attained_coverage_uses_levels_of_f():
    F = np.array([0.995, 0.9, 0.9, 0.6, 0.0])
    ff = np.array([5, 3, 1, 0, 3, 4, 2, 3])
    rep = hs.attained_coverage(F, ff)
    # levels 0.9 (first three nodes) and 0.6 (first four); 0.995 lies above hi
    np.testing.assert_allclose(rep.claimed, [0.9, 0.6])
    np.testing.assert_allclose(rep.alphas, [0.1, 0.4])
    np.testing.assert_allclose(rep.p_hat, [5 / 8, 2 / 8])


def test_avoid_coverage_is_side_aware():
    post = gmrf.GaussianPosterior(np.array([2.0, -2.0]), covariance=np.eye(2))
    r = ex.level_avoid(ex.ExcursionProblem(0.0, 0.1, fam.AVOID, config=gp.IntegrationConfig(n_particles=200)), post)
    draws = np.array([[1.0, -1.0], [1.0, 1.0], [-1.0, -1.0]])
    ff = hs.first_failure(r, draws)
    np.testing.assert_array_equal(ff, [2, 1, 0])


@given(st.integers(0, 1000))
def test_first_failure_counts_leading_successes(seed):
    rng = np.random.default_rng(seed)
    mu = rng.normal(1.0, 1.0, 5)
    r = _independent_result(mu)
    X = rng.normal(mu, 1.0, (30, 5))
    order = np.argsort(-r.F, kind="stable")
    ok = X[:, order] > 0
    expected = np.where(ok.all(1), 5, np.argmin(ok, axis=1))
    np.testing.assert_array_equal(hs.first_failure(r, X), expected)


def test_coverage_csv_columns(tmp_path):
    rep = hs.CoverageReport(np.array([0.1]), np.array([0.92]), np.array([0.01]), np.array([0.93]), 100, "eb", "fixed")
    path = tmp_path / "c.csv"
    hs.write_coverage_csv(path, [rep])
    head = path.read_text().splitlines()[0].split(",")
    assert head[:5] == ["alpha", "method", "p_hat", "diff", "se"]


def test_spec_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        hs.SimSpec("ex4", grid=2, n_obs=1, sigma=1.0)
    with pytest.raises(ValueError):
        hs.SimSpec("ex1", grid=2, n_obs=1, sigma=-1.0)
    p = tmp_path / "s.json"
    p.write_text('{"example": "ex3", "scale": 12, "seed": 5}')
    spec = hs.SimSpec.from_json(p)
    assert (spec.grid, spec.seed, spec.kappa2, spec.sigma) == (12, 5, 2.0, 0.5)
    p.write_text('{"example": "ex3", "colour": 1}')
    with pytest.raises(ValueError):
        hs.SimSpec.from_json(p)

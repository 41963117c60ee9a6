import math

import numpy as np
import pytest
from scipy import stats

from multires.core.exceptions import NumericalException
from multires.core.parallel import WorkerPool
from multires.models.linkage import YearGrid
from multires.models.state import ClusterLocation, ClusterState, CoefficientState, SamplerMode
from multires.schemas.chain import ChainConfig
from multires.schemas.linkage import Observation
from multires.schemas.mixture import BaseMeasure
from multires.services.diagnostics import effective_sample_size, mean_standard_error
from multires.services.kernels import MatrixNormalSpec, chain_adjacency, rq_covariance
from multires.services.linkage import LinkageService
from multires.services.mixture import (
    assign_clusters,
    canonical_labels,
    cluster_cooccurrence,
    update_alpha,
    wishart_draw,
)
from multires.services.samplers import (
    car_matrix,
    check_residual_cache,
    delta_posterior_params,
    ess_update_B,
    gibbs_sweep,
    gibbs_update_delta,
    gibbs_update_lambda_y,
    hx_posterior_params,
    initial_state,
    kappa_log_kernel,
    lambda_y_posterior_params,
    log_likelihood_terms,
    mh_update_kappa,
    residual_for,
    rho_log_kernel,
    slice_update_rho,
    tau_posterior_params,
)
from tests.conftest import make_dataset


def scalar_linkage(observations, counties=("c1",), membership=None):
    """Intercept-only counties over two years; period 1 is the first year alone."""
    membership = membership or {c: [c] for c in counties}
    dataset = make_dataset(list(counties), membership, observations, T=2, P=1)
    return LinkageService(dataset)


def unit_prior_state(linkage):
    """Chain state whose single location gives every coefficient a N(0, 1) prior."""
    state = initial_state(linkage, ChainConfig())
    location = state.clusters.locations[0]
    location.lambda_y = np.eye(1)
    location.kappa = np.ones(3)
    return state, location


def run_ess(linkage, n, rng):
    state, location = unit_prior_state(linkage)
    draws = np.empty((n, linkage.dataset.N))
    for g in range(n):
        for county in range(linkage.dataset.N):
            ess_update_B(county, state, linkage, location, rng, jitter=0.0)
        draws[g] = state.coeffs.B[:, 0, 0]
    check_residual_cache(state, linkage)
    return draws


def mc_se(draws):
    return draws.std(ddof=1) / math.sqrt(effective_sample_size(draws))


def test_log_likelihood_terms_are_gaussian_densities(tiny_linkage, rng):
    fitted = rng.normal(size=tiny_linkage.dataset.R)
    expected = stats.norm.logpdf(tiny_linkage.y, fitted, np.sqrt(tiny_linkage.sigma2))

    np.testing.assert_allclose(log_likelihood_terms(fitted, tiny_linkage), expected, rtol=1e-12)


def test_residual_excludes_only_the_county_itself(tiny_linkage, rng):
    state = initial_state(tiny_linkage, ChainConfig())
    state.coeffs.B = rng.normal(size=state.coeffs.B.shape)
    X = tiny_linkage.X
    state.cache.fitted = tiny_linkage.fitted_sums(state.coeffs.functions(X))

    for county in range(tiny_linkage.dataset.N):
        others = state.coeffs.functions(X)
        others[county] = 0.0
        rows, target = residual_for(county, state.cache, state.coeffs, tiny_linkage)
        expected = tiny_linkage.y[rows] - tiny_linkage.fitted_sums(others)[rows]

        np.testing.assert_allclose(target, expected, rtol=0, atol=1e-12)


def test_residual_by_brute_force_on_a_random_graph(rng):
    counties = ["c1", "c2", "c3", "c4", "c5"]
    membership = {c: [c] for c in counties}
    membership.update({"S1": ["c1", "c2", "c3"], "S2": ["c3", "c4", "c5"]})
    observations = []
    for block in membership:
        periods = sorted(rng.choice(np.arange(1, 5), size=rng.integers(1, 5), replace=False))
        observations += [
            Observation(block=block, period=int(q), y=float(rng.normal(scale=5.0)), sigma2=1.0)
            for q in periods
        ]
    linkage = LinkageService(make_dataset(counties, membership, observations))
    state = initial_state(linkage, ChainConfig())
    state.coeffs.B = rng.normal(size=state.coeffs.B.shape)
    f = state.coeffs.functions(linkage.X)
    state.cache.fitted = linkage.fitted_sums(f)
    years = linkage.dataset.grid.years

    for county, name in enumerate(counties):
        rows, target = residual_for(county, state.cache, state.coeffs, linkage)
        linked = [r for r, o in enumerate(observations) if name in membership[o.block]]
        assert list(rows) == linked
        expected = [
            observations[r].y
            - sum(
                f[counties.index(c), years.index(year)]
                for c, year in linkage.nested_cells(observations[r].block, observations[r].period)
                if c != name
            )
            for r in rows
        ]
        np.testing.assert_allclose(target, expected, rtol=0, atol=1e-9)


def test_ess_single_observation_posterior(rng):
    linkage = scalar_linkage([Observation(block="c1", period=1, y=2.0, sigma2=0.5)])
    draws = run_ess(linkage, 20000, rng)[:, 0]

    assert abs(draws.mean() - 4.0 / 3.0) < 4 * mc_se(draws)
    assert draws.var() == pytest.approx(1.0 / 3.0, abs=0.04)


def test_ess_uninformative_observation_returns_the_prior(rng):
    linkage = scalar_linkage([Observation(block="c1", period=1, y=2.0, sigma2=1e8)])
    draws = run_ess(linkage, 20000, rng)[:, 0]

    assert abs(draws.mean()) < 4 * mc_se(draws)
    assert draws.var() == pytest.approx(1.0, abs=0.1)


def test_ess_shared_block_posterior(rng):
    # b1 + b2 observed once: posterior precision I + 11'
    linkage = scalar_linkage(
        [Observation(block="S", period=1, y=2.0, sigma2=1.0)],
        counties=("c1", "c2"),
        membership={"S": ["c1", "c2"]},
    )
    draws = run_ess(linkage, 20000, rng)

    for column in draws.T:
        assert abs(column.mean() - 2.0 / 3.0) < 4 * mc_se(column)
    assert np.cov(draws.T)[0, 1] == pytest.approx(-1.0 / 3.0, abs=0.06)


def test_kappa_kernel_differences_match_dense_density(rng):
    grid = YearGrid(years=(2010, 2011, 2012, 2013))
    lambda_y = np.array([[2.0, 0.4], [0.4, 1.0]])
    members = rng.normal(size=(3, 2, grid.T))

    def dense(kappa, d):
        cov = np.kron(np.linalg.inv(lambda_y), rq_covariance(kappa, grid, 1e-8))
        density = stats.multivariate_normal(np.zeros(2 * grid.T), cov)
        return sum(density.logpdf(B.ravel()) for B in members) - kappa[d]

    first, second = [0.7, 1.3, 2.0], [0.7, 0.5, 2.0]
    kernel_diff = kappa_log_kernel(first, 1, members, lambda_y, grid) - kappa_log_kernel(
        second, 1, members, lambda_y, grid
    )

    assert kernel_diff == pytest.approx(dense(first, 1) - dense(second, 1), rel=1e-8)


def test_kappa_kernel_rejects_non_positive_values():
    grid = YearGrid(years=(2010, 2011))
    assert kappa_log_kernel([0.0, 1.0, 1.0], 0, np.empty((0, 1, 2)), np.eye(1), grid) == -math.inf


def test_kappa_without_members_samples_its_gamma_prior(rng):
    grid = YearGrid(years=(2010, 2011, 2012))
    location = ClusterLocation(lambda_y=np.eye(1), kappa=np.ones(3))
    empty = np.empty((0, 1, grid.T))
    config = ChainConfig()
    draws = np.array(
        [mh_update_kappa(location, 0, empty, grid, BaseMeasure(p=1), config, rng) for _ in range(8000)]
    )

    assert draws.mean() == pytest.approx(1.0, abs=0.08)
    assert np.median(draws) == pytest.approx(math.log(2.0), abs=0.08)


def test_lambda_y_scalar_posterior_parameters():
    df, scale = lambda_y_posterior_params(np.array([[[2.0]]]), np.eye(1))

    assert df == 3.0
    np.testing.assert_allclose(scale, [[0.2]])


def test_lambda_y_without_members_is_the_base_measure():
    df, scale = lambda_y_posterior_params(np.empty((0, 3, 4)), np.eye(4))

    assert df == 4.0
    np.testing.assert_allclose(scale, np.eye(3))


def test_lambda_y_draws_have_wishart_mean(rng):
    grid = YearGrid(years=(2010, 2011))
    location = ClusterLocation(lambda_y=np.eye(1), kappa=np.ones(3))
    config = ChainConfig(jitter=0.0)
    members = np.array([[[2.0, 0.0]]])
    draws = [gibbs_update_lambda_y(location, members, grid, config, rng)[0, 0] for _ in range(5000)]

    # C = [[1, 1/2], [1/2, 1]] gives B C^-1 B' = 16/3
    df, scale = lambda_y_posterior_params(members, rq_covariance(np.ones(3), grid, 0.0))
    assert df == 4.0
    assert scale[0, 0] == pytest.approx(3.0 / 19.0)
    assert np.mean(draws) == pytest.approx(12.0 / 19.0, abs=0.03)


def test_delta_scalar_posterior():
    mean, precision = delta_posterior_params(
        np.array([[1.5]]), np.array([[4.0]]), np.array([[1.0]]), np.array([[1.0]])
    )

    np.testing.assert_allclose(precision, [[5.0]])
    np.testing.assert_allclose(mean, [1.2])


def test_delta_posterior_matches_gaussian_conditioning(rng):
    P, T = 2, 4
    omega, d = chain_adjacency(T)
    Q = 1.5 * (d - 0.3 * omega)
    lambda_x = np.array([[1.0, 0.2], [0.2, 2.0]])
    h_x = np.array([[3.0, -0.5], [-0.5, 1.0]])
    x = rng.normal(size=(P, T))

    mean, precision = delta_posterior_params(x, h_x, lambda_x, Q)

    prior_cov = np.linalg.inv(np.kron(lambda_x, Q))
    noise_cov = np.linalg.inv(np.kron(h_x, np.eye(T)))
    gain = prior_cov @ np.linalg.inv(prior_cov + noise_cov)
    np.testing.assert_allclose(mean, gain @ x.ravel(), atol=1e-10)
    np.testing.assert_allclose(
        np.linalg.inv(precision), prior_cov - gain @ prior_cov, atol=1e-10
    )


def test_tau_parameters_match_direct_traces(rng):
    T = 5
    omega, d = chain_adjacency(T)
    lambda_x = np.array([[1.5, 0.3], [0.3, 1.0]])
    members = rng.normal(size=(3, 2, T))
    rho = 0.4

    shape, rate = tau_posterior_params(members, lambda_x, rho, a=2.0, b=0.5)

    traces = sum(np.trace((d - rho * omega) @ D.T @ lambda_x @ D) for D in members)
    assert shape == 2.0 + 0.5 * 3 * T * 2
    assert rate == pytest.approx(0.5 + 0.5 * traces, rel=1e-12)


def test_tau_without_members_is_the_prior():
    assert tau_posterior_params(np.empty((0, 2, 3)), np.eye(2), 0.0, 2.0, 3.0) == (2.0, 3.0)


def test_rho_kernel_differences_match_matrix_normal(rng):
    T = 4
    omega, d = chain_adjacency(T)
    lambda_x = np.array([[1.0, 0.1], [0.1, 0.5]])
    members = rng.normal(size=(2, 2, T))
    tau = 1.7

    def dense(rho):
        spec = MatrixNormalSpec.from_precisions(lambda_x, tau * (d - rho * omega))
        return sum(spec.logpdf(D) for D in members)

    kernel_diff = rho_log_kernel(0.6, members, lambda_x, tau, T) - rho_log_kernel(
        -0.2, members, lambda_x, tau, T
    )

    assert kernel_diff == pytest.approx(dense(0.6) - dense(-0.2), rel=1e-8)
    assert rho_log_kernel(1.0, members, lambda_x, tau, T) == -math.inf


def _car_location():
    return ClusterLocation(
        lambda_y=np.eye(1), kappa=np.ones(3), lambda_x=np.eye(1), tau_x=1.0, rho_x=0.0
    )


def test_rho_without_members_is_uniform(rng):
    location = _car_location()
    config = ChainConfig()
    draws = np.array(
        [slice_update_rho(location, np.empty((0, 1, 5)), 5, config, rng) for _ in range(3000)]
    )

    assert draws.min() > -1.0 and draws.max() < 1.0
    assert stats.kstest(draws, "uniform", args=(-1.0, 2.0)).pvalue > 0.01


def test_smooth_predictor_means_push_rho_up(rng):
    location = _car_location()
    members = np.full((1, 1, 5), 3.0)
    config = ChainConfig()
    draws = [slice_update_rho(location, members, 5, config, rng) for _ in range(2000)]

    assert np.mean(draws) > 0.5


def test_hx_posterior_parameters():
    X = np.array([[[1.0, 2.0]]])
    df, scale = hx_posterior_params(X, np.zeros_like(X))

    assert df == 4.0
    np.testing.assert_allclose(scale, [[1.0 / 6.0]])

    df, scale = hx_posterior_params(np.ones((3, 2, 4)), np.ones((3, 2, 4)))
    assert df == 3 * 4 + 2 + 1
    np.testing.assert_allclose(scale, np.eye(2))


def _run_sweeps(linkage, config, seed, workers, n=4):
    state = initial_state(linkage, config)
    rng = np.random.default_rng(seed)
    with WorkerPool(workers) as pool:
        for _ in range(n):
            gibbs_sweep(state, linkage, config, rng, pool=pool)
    return state


@pytest.mark.parametrize("mode", [SamplerMode.BASELINE, SamplerMode.PPMX])
def test_sweeps_are_deterministic_and_independent_of_workers(tiny_linkage, fast_config, mode):
    config = fast_config.model_copy(update={"mode": mode})
    first = _run_sweeps(tiny_linkage, config, 99, workers=1)
    again = _run_sweeps(tiny_linkage, config, 99, workers=1)
    threaded = _run_sweeps(tiny_linkage, config, 99, workers=2)

    for other in (again, threaded):
        np.testing.assert_array_equal(first.coeffs.B, other.coeffs.B)
        np.testing.assert_array_equal(first.clusters.labels, other.clusters.labels)
        assert first.clusters.alpha == other.clusters.alpha
        if mode == SamplerMode.PPMX:
            np.testing.assert_array_equal(first.coeffs.delta, other.coeffs.delta)
            np.testing.assert_array_equal(first.coeffs.h_x, other.coeffs.h_x)


def test_sweep_leaves_the_dataset_untouched(tiny_dataset, fast_config):
    linkage = LinkageService(tiny_dataset)
    y = linkage.y.copy()
    X = tiny_dataset.predictors.copy()

    state = _run_sweeps(linkage, fast_config, 5, workers=1)

    np.testing.assert_array_equal(linkage.y, y)
    np.testing.assert_array_equal(tiny_dataset.predictors, X)
    assert state.sweep == 4
    state.clusters.check()


def test_cache_drift_is_a_numerical_error(tiny_linkage):
    state = initial_state(tiny_linkage, ChainConfig())
    state.cache.fitted[0] += 1.0

    with pytest.raises(NumericalException):
        check_residual_cache(state, tiny_linkage)


def test_cache_check_resynchronizes_small_drift(tiny_linkage):
    state = initial_state(tiny_linkage, ChainConfig())
    state.cache.fitted[0] += 1e-9

    check_residual_cache(state, tiny_linkage)

    assert state.cache.fitted[0] == 0.0



def assert_mean_near(series, expected, bound=4.0):
    series = np.asarray(series, dtype=float)
    z = (series.mean() - expected) / mean_standard_error(series)
    assert abs(z) < bound, (series.mean(), expected, z)


def lambda_y_successive_conditionals(n_iter, seed):
    """Alternate B | Lambda_y and Lambda_y | B; Lambda_y keeps its Wishart(3, I) prior."""
    rng = np.random.default_rng(seed)
    grid = YearGrid(years=(2010, 2011, 2012))
    config = ChainConfig()
    C = rq_covariance([1.0, 1.0, 1.0], grid, config.jitter)
    location = ClusterLocation(lambda_y=wishart_draw(3, np.eye(2), rng), kappa=np.ones(3))
    draws = np.empty((n_iter, 2, 2))
    for it in range(n_iter):
        spec = MatrixNormalSpec(location.lambda_y, C)
        members_B = np.stack([spec.rvs(rng) for _ in range(2)])
        draws[it] = gibbs_update_lambda_y(location, members_B, grid, config, rng)
    return draws


def test_lambda_y_update_keeps_the_prior():
    draws = lambda_y_successive_conditionals(4000, seed=101)

    assert_mean_near(draws[:, 0, 0], 3.0)
    assert_mean_near(draws[:, 1, 1], 3.0)
    assert_mean_near(draws[:, 0, 1], 0.0)
    assert_mean_near(draws[:, 0, 0] ** 2, 3.0 * 2 + 9.0)


@pytest.mark.slow
def test_lambda_y_update_keeps_the_prior_over_a_long_run():
    draws = lambda_y_successive_conditionals(40000, seed=102)

    assert_mean_near(draws[:, 0, 0], 3.0)
    assert_mean_near(draws[:, 0, 1] ** 2, 3.0)


def test_hx_update_keeps_the_prior():
    rng = np.random.default_rng(103)
    N, P, T = 2, 2, 3
    delta = rng.normal(size=(N, P, T))
    h_x = wishart_draw(3, np.eye(P), rng)
    draws = np.empty((4000, P, P))
    for it in range(draws.shape[0]):
        L = np.linalg.cholesky(h_x)
        noise = np.linalg.solve(L.T, rng.standard_normal((P, N * T)))
        X = delta + noise.reshape(P, N, T).transpose(1, 0, 2)
        df, scale = hx_posterior_params(X, delta)
        h_x = draws[it] = wishart_draw(df, scale, rng)

    assert_mean_near(draws[:, 0, 0], 3.0)
    assert_mean_near(draws[:, 1, 1], 3.0)
    assert_mean_near(draws[:, 0, 1], 0.0)


def run_mixture(B, grid, n_iter, n_burn, seed):
    rng = np.random.default_rng(seed)
    config = ChainConfig()
    base = BaseMeasure(p=B.shape[1])
    coeffs = CoefficientState(B=B)
    clusters = ClusterState(
        labels=np.zeros(B.shape[0], dtype=int),
        locations=[ClusterLocation(lambda_y=3.0 * np.eye(B.shape[1]), kappa=np.ones(3))],
        alpha=1.0,
    )
    kept = []
    for it in range(n_iter):
        assign_clusters(clusters, coeffs, base, config.c_star, grid, rng, config.jitter)
        for m, location in enumerate(clusters.locations):
            members_B = B[clusters.members(m)]
            for d in range(3):
                mh_update_kappa(location, d, members_B, grid, base, config, rng)
            gibbs_update_lambda_y(location, members_B, grid, config, rng)
        update_alpha(clusters, config.alpha_a, config.alpha_b, rng)
        if it >= n_burn:
            kept.append(canonical_labels(clusters.labels))
    return np.array(kept)


def test_two_separated_clusters_are_found():
    rng = np.random.default_rng(104)
    grid = YearGrid(years=tuple(range(2008, 2013)))
    groups = np.repeat([0, 1], 10)
    B = np.stack(
        [
            MatrixNormalSpec(np.eye(2), rq_covariance([1.0 if g == 0 else 100.0, 1.0, 1.0], grid)).rvs(rng)
            for g in groups
        ]
    )

    co = cluster_cooccurrence(run_mixture(B, grid, n_iter=300, n_burn=100, seed=105))
    same = groups[:, None] == groups[None, :]
    upper = np.triu_indices(groups.size, k=1)
    assert np.mean((co > 0.5)[upper] == same[upper]) >= 0.95


def test_kappa_scale_is_recovered_with_one_cluster():
    rng = np.random.default_rng(106)
    grid = YearGrid(years=tuple(range(2008, 2013)))
    truth = MatrixNormalSpec(np.eye(2), rq_covariance([1.0, 1.0, 1.0], grid))
    members_B = np.stack([truth.rvs(rng) for _ in range(60)])
    config = ChainConfig()
    base = BaseMeasure(p=2)
    location = ClusterLocation(lambda_y=3.0 * np.eye(2), kappa=np.ones(3))

    scale = []
    for it in range(1500):
        for d in range(3):
            mh_update_kappa(location, d, members_B, grid, base, config, rng)
        gibbs_update_lambda_y(location, members_B, grid, config, rng)
        if it >= 500:
            # the data identify the average row variance, not kappa1 and Lambda_y apart
            scale.append(np.trace(np.linalg.inv(location.lambda_y)) / (2.0 * location.kappa[0]))

    assert np.median(scale) == pytest.approx(1.0, rel=0.25)


def test_delta_follows_its_prior_when_predictors_carry_no_information(tiny_linkage):
    config = ChainConfig(mode=SamplerMode.PPMX)
    state = initial_state(tiny_linkage, config)
    state.coeffs.h_x = 1e-10 * np.eye(2)
    location = ClusterLocation(
        lambda_y=np.eye(2),
        kappa=np.ones(3),
        lambda_x=np.array([[2.0, 0.5], [0.5, 1.0]]),
        tau_x=1.5,
        rho_x=0.4,
    )
    rng = np.random.default_rng(107)
    n = 20000
    draws = np.array([gibbs_update_delta(0, state, tiny_linkage, location, rng).ravel() for _ in range(n)])

    expected = np.linalg.inv(np.kron(location.lambda_x, car_matrix(location, 3)))
    se = np.sqrt(np.diag(expected) / n)
    assert np.all(np.abs(draws.mean(axis=0)) < 4.0 * se)
    np.testing.assert_allclose(np.cov(draws.T), expected, atol=0.05 * np.abs(expected).max())

import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from multires.core.exceptions import MultiresException, NumericalException
from multires.core.parallel import WorkerPool, next_key, substream
from multires.models.linkage import YearGrid
from multires.models.state import (
    ChainState,
    ClusterLocation,
    ClusterState,
    CoefficientState,
    ResidualCache,
    SamplerMode,
)
from multires.schemas.chain import ChainConfig
from multires.schemas.mixture import BaseMeasure
from multires.services.kernels import (
    LOG_2PI,
    MatrixNormalSpec,
    chain_adjacency,
    inverse_spd,
    rq_covariance,
)
from multires.services.linkage import LinkageService
from multires.services.mixture import (
    assign_clusters,
    coefficient_prior,
    update_alpha,
    wishart_draw,
)
from multires.services.slice import elliptical_slice, slice_sample

logger = logging.getLogger(__name__)

# substream stage ids inside one sweep
STAGE_B, STAGE_COVARIANCE, STAGE_ASSIGN, STAGE_ALPHA = 0, 1, 2, 3
STAGE_DELTA, STAGE_CAR, STAGE_HX = 4, 5, 6


def county_functions(X_l: np.ndarray, B_l: np.ndarray) -> np.ndarray:
    """f_lj = x_lj' beta_lj over the years of one county."""
    return np.einsum("pt,pt->t", X_l, B_l)


def log_likelihood_terms(fitted: np.ndarray, linkage: LinkageService) -> np.ndarray:
    """Per-observation Gaussian log density of y given the fitted sums."""
    resid = linkage.y - fitted
    return -0.5 * (LOG_2PI + np.log(linkage.sigma2) + resid * resid / linkage.sigma2)


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------


def residual_for(
    county: int, cache: ResidualCache, coeffs: CoefficientState, linkage: LinkageService
) -> Tuple[np.ndarray, np.ndarray]:
    """Observation rows linked to a county and their targets net of every other county."""
    rows = linkage.county_rows[county]
    own = linkage.county_local[county] @ county_functions(linkage.X[county], coeffs.B[county])
    return rows, linkage.y[rows] - (cache.fitted[rows] - own)


def ess_update_B(
    county: int,
    state: ChainState,
    linkage: LinkageService,
    location: ClusterLocation,
    rng: np.random.Generator,
    jitter: float = 1e-8,
) -> np.ndarray:
    """Elliptical slice step for one county's P x T coefficient matrix."""
    coeffs = state.coeffs
    rows, target = residual_for(county, state.cache, coeffs, linkage)
    local = linkage.county_local[county]
    X_l = linkage.X[county]
    sigma2 = linkage.sigma2[rows]

    def log_likelihood(B_l: np.ndarray) -> float:
        resid = target - local @ county_functions(X_l, B_l)
        value = -0.5 * float(np.sum(resid * resid / sigma2))
        return value if math.isfinite(value) else -math.inf

    prior = coefficient_prior(location, linkage.dataset.grid, jitter)
    current = coeffs.B[county]
    proposal, _ = elliptical_slice(current, prior.rvs(rng), log_likelihood, rng)

    old_f = county_functions(X_l, current)
    new_f = county_functions(X_l, proposal)
    state.cache.fitted[rows] += local @ (new_f - old_f)
    coeffs.B[county] = proposal
    return proposal


# ---------------------------------------------------------------------------
# covariance parameters of the coefficient prior
# ---------------------------------------------------------------------------


def kappa_log_kernel(
    kappa: Sequence[float],
    d: int,
    members_B: np.ndarray,
    lambda_y: np.ndarray,
    grid: YearGrid,
    jitter: float = 1e-8,
    a: float = 1.0,
    b: float = 1.0,
) -> float:
    """Log full conditional of kappa_d up to a constant.

    -0.5 n P log|C| - 0.5 sum tr(C^-1 B' Lambda B) + (a - 1) log kappa_d - b kappa_d.
    """
    kappa = np.asarray(kappa, dtype=float)
    value_d = kappa[d]
    if value_d <= 0.0:
        return -math.inf
    prior = (a - 1.0) * math.log(value_d) - b * value_d
    if len(members_B) == 0:
        return prior
    try:
        spec = MatrixNormalSpec(lambda_y, rq_covariance(kappa, grid, jitter))
    except MultiresException:
        return -math.inf
    P = spec.P
    quadratic = spec.quadratic_sum(members_B)
    return -0.5 * len(members_B) * P * spec.log_det_col_covariance - 0.5 * quadratic + prior


def mh_update_kappa(
    location: ClusterLocation,
    d: int,
    members_B: np.ndarray,
    grid: YearGrid,
    base: BaseMeasure,
    config: ChainConfig,
    rng: np.random.Generator,
) -> float:
    """Slice step on log kappa_d; the Jacobian adds u to the log kernel."""
    kappa = location.kappa.copy()

    def log_density(u: float) -> float:
        if u > 700.0:
            return -math.inf
        kappa[d] = math.exp(u)
        return kappa_log_kernel(
            kappa, d, members_B, location.lambda_y, grid, config.jitter, base.kappa_a, base.kappa_b
        ) + u

    u = slice_sample(
        math.log(location.kappa[d]),
        log_density,
        rng,
        width=config.slice_width,
        max_steps=config.slice_max_steps,
    )
    location.kappa[d] = math.exp(u)
    return location.kappa[d]


def lambda_y_posterior_params(
    members_B: np.ndarray, col_covariance: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Wishart df and scale: (n T + P + 1, (sum B C^-1 B' + I)^-1)."""
    members_B = np.asarray(members_B, dtype=float)
    n, P, T = members_B.shape
    precision = inverse_spd(col_covariance)
    inner = np.eye(P) + np.einsum("npt,ts,nqs->pq", members_B, precision, members_B)
    try:
        scale = inverse_spd(0.5 * (inner + inner.T))
    except (linalg.LinAlgError, ValueError):
        raise NumericalException("Wishart scale for Lambda_y is not positive definite")
    return n * T + P + 1.0, scale


def gibbs_update_lambda_y(
    location: ClusterLocation,
    members_B: np.ndarray,
    grid: YearGrid,
    config: ChainConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    P = location.lambda_y.shape[0]
    members_B = np.asarray(members_B, dtype=float).reshape(-1, P, grid.T)
    C = rq_covariance(location.kappa, grid, config.jitter)
    df, scale = lambda_y_posterior_params(members_B, C)
    location.lambda_y = wishart_draw(df, scale, rng)
    return location.lambda_y


# ---------------------------------------------------------------------------
# predictor model
# ---------------------------------------------------------------------------


def car_matrix(location: ClusterLocation, T: int) -> np.ndarray:
    omega, d = chain_adjacency(T)
    return location.tau_x * (d - location.rho_x * omega)


def delta_posterior_params(
    x_l: np.ndarray, h_x: np.ndarray, lambda_x: np.ndarray, Q: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and precision of the row-stacked Delta_l given x_l."""
    P, T = x_l.shape
    data_precision = np.kron(h_x, np.eye(T))
    precision = data_precision + np.kron(lambda_x, Q)
    precision = 0.5 * (precision + precision.T)
    try:
        factor = linalg.cho_factor(precision, lower=True)
    except (linalg.LinAlgError, ValueError):
        raise NumericalException("posterior precision of Delta is not positive definite")
    mean = linalg.cho_solve(factor, data_precision @ x_l.ravel())
    return mean, precision


def gibbs_update_delta(
    county: int,
    state: ChainState,
    linkage: LinkageService,
    location: ClusterLocation,
    rng: np.random.Generator,
) -> np.ndarray:
    x_l = linkage.X[county]
    P, T = x_l.shape
    mean, precision = delta_posterior_params(
        x_l, state.coeffs.h_x, location.lambda_x, car_matrix(location, T)
    )
    L = linalg.cholesky(precision, lower=True)
    draw = mean + linalg.solve_triangular(L, rng.standard_normal(P * T), lower=True, trans="T")
    return draw.reshape(P, T)


def _car_traces(members_delta: np.ndarray, lambda_x: np.ndarray, T: int) -> Tuple[float, float]:
    """sum tr(D Delta' Lambda Delta) and sum tr(Omega Delta' Lambda Delta)."""
    omega, d = chain_adjacency(T)
    gram = np.einsum("npt,pq,nqs->ts", members_delta, lambda_x, members_delta)
    return float(np.sum(d * gram)), float(np.sum(omega * gram))


def tau_posterior_params(
    members_delta: np.ndarray,
    lambda_x: np.ndarray,
    rho: float,
    a: float = 1.0,
    b: float = 1.0,
) -> Tuple[float, float]:
    """Gamma shape a + n T P / 2 and rate b + sum tr(R Delta' Lambda Delta) / 2."""
    members_delta = np.asarray(members_delta, dtype=float)
    if members_delta.size == 0:
        return a, b
    n, P, T = members_delta.shape
    trace_d, trace_omega = _car_traces(members_delta, lambda_x, T)
    rate = b + 0.5 * (trace_d - rho * trace_omega)
    if not rate > 0.0:
        raise NumericalException("non-positive gamma rate for tau", details={"rate": rate})
    return a + 0.5 * n * T * P, rate


def gibbs_update_tau(
    location: ClusterLocation,
    members_delta: np.ndarray,
    base: BaseMeasure,
    rng: np.random.Generator,
) -> float:
    shape, rate = tau_posterior_params(
        members_delta, location.lambda_x, location.rho_x, base.tau_a, base.tau_b
    )
    location.tau_x = float(rng.gamma(shape=shape, scale=1.0 / rate))
    return location.tau_x


def rho_log_kernel(
    rho: float, members_delta: np.ndarray, lambda_x: np.ndarray, tau: float, T: int
) -> float:
    """0.5 n P log|D - rho Omega| + 0.5 tau rho sum tr(Omega Delta' Lambda Delta)."""
    if not -1.0 < rho < 1.0:
        return -math.inf
    members_delta = np.asarray(members_delta, dtype=float)
    if members_delta.size == 0:
        return 0.0
    n, P, _ = members_delta.shape
    omega, d = chain_adjacency(T)
    sign, log_det = np.linalg.slogdet(d - rho * omega)
    if sign <= 0:
        return -math.inf
    _, trace_omega = _car_traces(members_delta, lambda_x, T)
    return 0.5 * n * P * log_det + 0.5 * tau * rho * trace_omega


def slice_update_rho(
    location: ClusterLocation,
    members_delta: np.ndarray,
    T: int,
    config: ChainConfig,
    rng: np.random.Generator,
) -> float:
    location.rho_x = slice_sample(
        location.rho_x,
        lambda r: rho_log_kernel(r, members_delta, location.lambda_x, location.tau_x, T),
        rng,
        width=config.slice_width,
        max_steps=config.slice_max_steps,
        lower=-1.0,
        upper=1.0,
    )
    return location.rho_x


def hx_posterior_params(X: np.ndarray, delta: np.ndarray) -> Tuple[float, np.ndarray]:
    """Wishart df N T + P + 1 and scale (sum (x - delta)(x - delta)' + I)^-1."""
    N, P, T = X.shape
    resid = X - delta
    inner = np.eye(P) + np.einsum("npt,nqt->pq", resid, resid)
    return N * T + P + 1.0, inverse_spd(0.5 * (inner + inner.T))


def gibbs_update_hx(state: ChainState, linkage: LinkageService, rng: np.random.Generator) -> np.ndarray:
    df, scale = hx_posterior_params(linkage.X, state.coeffs.delta)
    state.coeffs.h_x = wishart_draw(df, scale, rng)
    return state.coeffs.h_x


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


def base_measure(P: int) -> BaseMeasure:
    return BaseMeasure(p=P)


def initial_state(linkage: LinkageService, config: ChainConfig) -> ChainState:
    """One cluster, zero coefficients, predictor means at the observed predictors."""
    dataset = linkage.dataset
    N, P, T = dataset.N, dataset.P, dataset.T
    location = ClusterLocation(lambda_y=(P + 1.0) * np.eye(P), kappa=np.ones(3))
    coeffs = CoefficientState(B=np.zeros((N, P, T)))
    if config.mode == SamplerMode.PPMX:
        location.lambda_x = (P + 1.0) * np.eye(P)
        location.tau_x = 1.0
        location.rho_x = 0.0
        coeffs.delta = dataset.predictors.copy()
        coeffs.h_x = np.eye(P)
    clusters = ClusterState(
        labels=np.zeros(N, dtype=int),
        locations=[location],
        alpha=config.alpha_init,
        mode=config.mode,
    )
    cache = ResidualCache(fitted=linkage.fitted_sums(coeffs.functions(linkage.X)))
    return ChainState(coeffs=coeffs, clusters=clusters, cache=cache)


def check_residual_cache(state: ChainState, linkage: LinkageService, rtol: float = 1e-6) -> float:
    """Compare the cache with a from-scratch sum; resynchronize it afterwards."""
    fresh = linkage.fitted_sums(state.coeffs.functions(linkage.X))
    scale = np.maximum(np.abs(fresh), 1.0)
    drift = float(np.max(np.abs(state.cache.fitted - fresh) / scale)) if fresh.size else 0.0
    if drift > rtol:
        raise NumericalException(
            "residual cache drifted from direct recomputation",
            details={"sweep": state.sweep, "relative_drift": drift},
        )
    state.cache.fitted = fresh
    return drift


def check_state(state: ChainState):
    clusters = state.clusters
    problems = []
    try:
        clusters.check()
    except AssertionError as exc:
        problems.append(str(exc))
    if not np.isfinite(state.coeffs.B).all():
        problems.append("non-finite coefficients")
    if not clusters.alpha > 0:
        problems.append("non-positive alpha")
    for m, location in enumerate(clusters.locations):
        if not np.all(location.kappa > 0):
            problems.append(f"non-positive kappa in cluster {m}")
        if clusters.mode == SamplerMode.PPMX:
            if not location.tau_x > 0:
                problems.append(f"non-positive tau in cluster {m}")
            if not -1.0 < location.rho_x < 1.0:
                problems.append(f"rho outside (-1, 1) in cluster {m}")
    if problems:
        raise NumericalException(
            "chain state invariant violated", details={"sweep": state.sweep, "problems": problems}
        )


def gibbs_sweep(
    state: ChainState,
    linkage: LinkageService,
    config: ChainConfig,
    rng: np.random.Generator,
    pool: Optional[WorkerPool] = None,
    base: Optional[BaseMeasure] = None,
) -> ChainState:
    """One scan: B, kappa and Lambda_y, labels, alpha, then the predictor blocks."""
    pool = pool or WorkerPool(1)
    dataset = linkage.dataset
    grid = dataset.grid
    base = base or base_measure(dataset.P)
    clusters = state.clusters
    key = next_key(rng)

    for county in range(dataset.N):
        location = clusters.locations[clusters.labels[county]]
        ess_update_B(county, state, linkage, location, substream(key, STAGE_B, county), config.jitter)

    def update_covariance(m: int) -> ClusterLocation:
        task_rng = substream(key, STAGE_COVARIANCE, m)
        location = clusters.locations[m].copy()
        members_B = state.coeffs.B[clusters.members(m)]
        for d in range(3):
            mh_update_kappa(location, d, members_B, grid, base, config, task_rng)
        gibbs_update_lambda_y(location, members_B, grid, config, task_rng)
        return location

    clusters.locations = pool.map(update_covariance, range(clusters.M))

    assign_clusters(
        clusters,
        state.coeffs,
        base,
        config.c_star,
        grid,
        substream(key, STAGE_ASSIGN),
        jitter=config.jitter,
        diagnostics=state.diagnostics,
    )
    update_alpha(clusters, config.alpha_a, config.alpha_b, substream(key, STAGE_ALPHA))

    if config.mode == SamplerMode.PPMX:
        deltas = pool.map(
            lambda county: gibbs_update_delta(
                county,
                state,
                linkage,
                clusters.locations[clusters.labels[county]],
                substream(key, STAGE_DELTA, county),
            ),
            range(dataset.N),
        )
        state.coeffs.delta = np.stack(deltas)

        def update_car(m: int) -> ClusterLocation:
            task_rng = substream(key, STAGE_CAR, m)
            location = clusters.locations[m].copy()
            members_delta = state.coeffs.delta[clusters.members(m)]
            gibbs_update_tau(location, members_delta, base, task_rng)
            slice_update_rho(location, members_delta, dataset.T, config, task_rng)
            return location

        clusters.locations = pool.map(update_car, range(clusters.M))
        gibbs_update_hx(state, linkage, substream(key, STAGE_HX))

    state.sweep += 1
    check_state(state)
    if state.sweep % config.cache_check_every == 0:
        check_residual_cache(state, linkage)
    return state

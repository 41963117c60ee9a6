import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from multires.core.exceptions import MultiresException, ValidationException
from multires.models.linkage import YearGrid
from multires.models.state import (
    ClusterLocation,
    ClusterState,
    CoefficientState,
    SamplerMode,
)
from multires.schemas.mixture import BaseMeasure
from multires.services.kernels import MatrixNormalSpec, chain_adjacency, rq_covariance

logger = logging.getLogger(__name__)

Likelihood = Callable[[int, ClusterLocation], float]


def stick_weights(v: Sequence[float]) -> np.ndarray:
    """p_h = v_h * prod_{k<h} (1 - v_k), with the leftover mass appended."""
    v = np.asarray(v, dtype=float)
    if np.any((v <= 0.0) | (v >= 1.0)):
        raise ValidationException("stick proportions must lie in (0, 1)", field="v")
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - v)))
    return np.append(v * remaining[:-1], remaining[-1])


def wishart_draw(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    P = scale.shape[0]
    draw = stats.wishart.rvs(df=df, scale=scale, random_state=rng)
    return np.atleast_2d(draw).reshape(P, P)


def draw_location(base: BaseMeasure, mode: SamplerMode, rng: np.random.Generator) -> ClusterLocation:
    """One location from G0."""
    location = ClusterLocation(
        lambda_y=wishart_draw(base.wishart_df, base.wishart_scale, rng),
        kappa=rng.gamma(shape=base.kappa_a, scale=1.0 / base.kappa_b, size=3),
    )
    if mode == SamplerMode.PPMX:
        location.lambda_x = wishart_draw(base.wishart_df, base.wishart_scale, rng)
        location.tau_x = float(rng.gamma(shape=base.tau_a, scale=1.0 / base.tau_b))
        location.rho_x = float(rng.uniform(base.rho_low, base.rho_high))
    return location


def coefficient_prior(location: ClusterLocation, grid: YearGrid, jitter: float) -> MatrixNormalSpec:
    return MatrixNormalSpec(location.lambda_y, rq_covariance(location.kappa, grid, jitter))


def predictor_prior(location: ClusterLocation, T: int) -> MatrixNormalSpec:
    omega, d = chain_adjacency(T)
    Q = location.tau_x * (d - location.rho_x * omega)
    return MatrixNormalSpec.from_precisions(location.lambda_x, Q)


class LocationLikelihood:
    """Caches the matrix-normal factorizations of each candidate location."""

    def __init__(self, coeffs: CoefficientState, grid: YearGrid, mode: SamplerMode, jitter: float):
        self.coeffs = coeffs
        self.grid = grid
        self.mode = mode
        self.jitter = jitter
        self._specs: Dict[int, Optional[Tuple[MatrixNormalSpec, Optional[MatrixNormalSpec]]]] = {}

    def _spec(self, location: ClusterLocation):
        key = id(location)
        if key not in self._specs:
            try:
                b_spec = coefficient_prior(location, self.grid, self.jitter)
                x_spec = None
                if self.mode == SamplerMode.PPMX:
                    x_spec = predictor_prior(location, self.grid.T)
                self._specs[key] = (b_spec, x_spec)
            except MultiresException:
                self._specs[key] = None
        return self._specs[key]

    def forget(self, location: ClusterLocation):
        self._specs.pop(id(location), None)

    def __call__(self, county: int, location: ClusterLocation) -> float:
        specs = self._spec(location)
        if specs is None:
            return -math.inf
        b_spec, x_spec = specs
        value = b_spec.logpdf(self.coeffs.B[county])
        if x_spec is not None:
            value += x_spec.logpdf(self.coeffs.delta[county])
        return value


def cluster_log_weights(
    county: int,
    counts: np.ndarray,
    candidates: Sequence[ClusterLocation],
    alpha: float,
    c_star: int,
    likelihood: Likelihood,
) -> np.ndarray:
    """Unnormalized log weights over existing clusters then auxiliaries.

    counts excludes the county being reassigned; candidates beyond
    len(counts) are the auxiliary locations.
    """
    M = len(counts)
    log_prior = np.empty(len(candidates))
    with np.errstate(divide="ignore"):
        log_prior[:M] = np.log(counts)
    log_prior[M:] = math.log(alpha / c_star)
    log_lik = np.array([likelihood(county, loc) for loc in candidates], dtype=float)
    log_lik[~np.isfinite(log_lik)] = -math.inf
    return log_prior + log_lik


def normalize_log_weights(log_weights: np.ndarray) -> Optional[np.ndarray]:
    """Max-subtracted softmax; None when every weight vanished."""
    top = np.max(log_weights)
    if not np.isfinite(top):
        return None
    weights = np.exp(log_weights - top)
    return weights / weights.sum()


def _choose(probabilities: np.ndarray, rng: np.random.Generator) -> int:
    cumulative = np.cumsum(probabilities)
    index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(index, len(probabilities) - 1)


def assign_clusters(
    state: ClusterState,
    coeffs: CoefficientState,
    base: BaseMeasure,
    c_star: int,
    grid: YearGrid,
    rng: np.random.Generator,
    jitter: float = 1e-8,
    likelihood: Optional[Likelihood] = None,
    diagnostics: Optional[Dict[str, int]] = None,
) -> ClusterState:
    """One auxiliary-variable Gibbs scan over every county's label."""
    if likelihood is None:
        likelihood = LocationLikelihood(coeffs, grid, state.mode, jitter)
    labels = state.labels
    locations = state.locations
    counts = list(np.bincount(labels, minlength=len(locations)))

    for county in range(labels.size):
        old = int(labels[county])
        counts[old] -= 1
        labels[county] = -1
        auxiliaries: List[ClusterLocation] = []
        was_singleton = counts[old] == 0
        if was_singleton:
            # a singleton's own location is the first auxiliary candidate
            auxiliaries.append(locations.pop(old))
            counts.pop(old)
            labels[labels > old] -= 1
        while len(auxiliaries) < c_star:
            auxiliaries.append(draw_location(base, state.mode, rng))

        candidates = locations + auxiliaries
        log_weights = cluster_log_weights(
            county, np.asarray(counts, dtype=float), candidates, state.alpha, c_star, likelihood
        )
        probabilities = normalize_log_weights(log_weights)
        M = len(locations)
        if probabilities is None:
            if diagnostics is not None:
                diagnostics["vanished_weights"] = diagnostics.get("vanished_weights", 0) + 1
            choice = M if was_singleton else old
        else:
            choice = _choose(probabilities, rng)

        if choice >= M:
            locations.append(candidates[choice])
            counts.append(1)
            labels[county] = M
        else:
            counts[choice] += 1
            labels[county] = choice
        for unused in auxiliaries:
            if unused is not candidates[choice] and hasattr(likelihood, "forget"):
                likelihood.forget(unused)

    state.check()
    return state


def escobar_west_weights(
    eta: float, M: int, N: int, a: float, b: float
) -> Tuple[float, float, float, float]:
    """Mixture weight and gamma parameters of the alpha full conditional.

    Returns (pi, shape_with, shape_without, rate) where alpha is drawn from
    Ga(shape_with, rate) with probability pi, else Ga(shape_without, rate).
    """
    rate = b - math.log(eta)
    odds = (a + M - 1.0) / (N * rate)
    return odds / (1.0 + odds), a + M, a + M - 1.0, rate


def update_alpha(
    state: ClusterState, a: float, b: float, rng: np.random.Generator
) -> float:
    """Auxiliary-variable draw of the DP concentration."""
    N = state.labels.size
    eta = rng.beta(state.alpha + 1.0, N)
    eta = min(max(eta, np.finfo(float).tiny), 1.0)
    pi, shape_with, shape_without, rate = escobar_west_weights(eta, state.M, N, a, b)
    shape = shape_with if rng.random() < pi else shape_without
    state.alpha = float(rng.gamma(shape=shape, scale=1.0 / rate))
    return state.alpha


def crp_expected_clusters(alpha: float, N: int) -> float:
    return float(sum(alpha / (alpha + i - 1.0) for i in range(1, N + 1)))


def canonical_labels(labels: Sequence[int]) -> np.ndarray:
    """Relabel 1..M in order of first occurrence."""
    mapping: Dict[int, int] = {}
    out = np.empty(len(labels), dtype=int)
    for i, label in enumerate(labels):
        out[i] = mapping.setdefault(int(label), len(mapping) + 1)
    return out


def cluster_cooccurrence(draws: np.ndarray) -> np.ndarray:
    """Fraction of draws in which each pair of counties shares a cluster."""
    draws = np.atleast_2d(np.asarray(draws))
    if draws.size == 0 or draws.shape[0] == 0:
        raise ValidationException("cluster co-occurrence needs at least one draw")
    together = draws[:, :, None] == draws[:, None, :]
    return together.mean(axis=0)

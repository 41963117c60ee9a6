import logging
import math
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from multires.core.exceptions import NotFoundException, ValidationException
from multires.models.chain import ChainDraws
from multires.models.linkage import Dataset
from multires.schemas.reports import (
    FitReport,
    FunctionSummaryRow,
    HoldoutReport,
    HoldoutRow,
    PseudoStatistic,
    RollupRow,
    TruthCompareRow,
)
from multires.services.diagnostics import convergence_summary
from multires.services.linkage import LinkageService

logger = logging.getLogger(__name__)

LEVEL = 0.95
ALL_TIERS = "all"


def equal_tail_interval(draws: np.ndarray, level: float = LEVEL) -> Tuple[np.ndarray, np.ndarray]:
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(draws, [tail, 100.0 - tail], axis=0)
    return lo, hi


def hpd_interval(draws: np.ndarray, level: float = LEVEL) -> Tuple[np.ndarray, np.ndarray]:
    """Shortest interval holding ceil(level * G) sorted draws, cellwise."""
    ordered = np.sort(draws, axis=0)
    G = ordered.shape[0]
    width = max(1, int(math.ceil(level * G)))
    spans = ordered[width - 1:] - ordered[: G - width + 1]
    start = np.argmin(spans, axis=0)
    lo = np.take_along_axis(ordered, start[None, ...], axis=0)[0]
    hi = np.take_along_axis(ordered, (start + width - 1)[None, ...], axis=0)[0]
    return lo, hi


def credible_interval(draws: np.ndarray, interval: str = "equal-tail") -> Tuple[np.ndarray, np.ndarray]:
    if interval == "equal-tail":
        return equal_tail_interval(draws)
    if interval == "hpd":
        return hpd_interval(draws)
    raise ValidationException(f"unknown interval kind {interval}", field="interval")


def _require_draws(G: int, min_draws: int):
    if G < min_draws:
        raise ValidationException(
            f"insufficient draws: {G} retained, at least {min_draws} needed", field="draws"
        )


def fitted_functions(
    f_draws: np.ndarray, min_draws: int = 30, interval: str = "equal-tail"
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posterior mean and 95% interval of every county-year function."""
    f_draws = np.asarray(f_draws, dtype=float)
    _require_draws(f_draws.shape[0], min_draws)
    lo, hi = credible_interval(f_draws, interval)
    return f_draws.mean(axis=0), lo, hi


def function_summary_rows(
    chain: ChainDraws,
    min_draws: int = 30,
    interval: str = "equal-tail",
    county: Optional[str] = None,
) -> List[FunctionSummaryRow]:
    mean, lo, hi = fitted_functions(chain.f, min_draws, interval)
    rows = []
    for i, county_id in enumerate(chain.county_ids):
        if county is not None and county_id != county:
            continue
        for j, year in enumerate(chain.years):
            rows.append(
                FunctionSummaryRow(
                    county_id=county_id,
                    year=year,
                    mean=mean[i, j],
                    lo95=lo[i, j],
                    hi95=hi[i, j],
                )
            )
    return rows


def pseudo_statistics(
    posterior_mean_B: np.ndarray, linkage: LinkageService, county: Optional[str] = None
) -> List[PseudoStatistic]:
    """Observation minus every other nested fitted term, one value per link.

    The fitted terms come from the posterior-mean coefficients.
    """
    dataset = linkage.dataset
    f_hat = np.einsum("npt,npt->nt", dataset.predictors, posterior_mean_B)
    fitted = linkage.fitted_sums(f_hat)
    incidence = linkage.incidence
    T = dataset.T
    results = []
    for r, obs in enumerate(dataset.observations):
        start, stop = incidence.indptr[r], incidence.indptr[r + 1]
        for col, weight in zip(incidence.indices[start:stop], incidence.data[start:stop]):
            i, j = divmod(int(col), T)
            county_id = dataset.graph.counties[i]
            if county is not None and county_id != county:
                continue
            others = fitted[r] - weight * f_hat[i, j]
            results.append(
                PseudoStatistic(
                    county_id=county_id,
                    year=dataset.grid.years[j],
                    block_id=obs.block,
                    period_id=obs.period,
                    value=(obs.y - others) / weight,
                    precision=1.0 / obs.sigma2,
                )
            )
    return results


def rollup(
    f_draws: np.ndarray,
    linkage: LinkageService,
    grouping: Mapping[str, str],
    interval: str = "equal-tail",
) -> List[RollupRow]:
    """Group-year sums of the function draws, compared with 1-year group statistics."""
    dataset = linkage.dataset
    unknown = sorted(set(grouping) - set(dataset.graph.counties))
    if unknown:
        raise NotFoundException(
            f"grouping names unknown counties: {', '.join(unknown[:5])}",
            resource_type="county",
            resource_id=unknown[0],
        )
    missing = [c for c in dataset.graph.counties if c not in grouping]
    if missing:
        raise ValidationException(
            f"grouping does not cover every county; first missing {missing[0]}", field="grouping"
        )

    groups: Dict[str, List[int]] = {}
    for i, county_id in enumerate(dataset.graph.counties):
        groups.setdefault(grouping[county_id], []).append(i)

    one_year: Dict[Tuple[str, int], float] = {}
    for obs in dataset.observations:
        years = dataset.periods.year_indices(obs.period)
        if len(years) == 1:
            one_year[(obs.block, int(years[0]))] = obs.y

    f_draws = np.asarray(f_draws, dtype=float)
    rows = []
    for group_id in sorted(groups):
        sums = f_draws[:, groups[group_id], :].sum(axis=1)
        lo, hi = credible_interval(sums, interval)
        mean = sums.mean(axis=0)
        for j, year in enumerate(dataset.grid.years):
            observed = one_year.get((group_id, j))
            pct = None
            if observed is not None and observed != 0.0:
                pct = 100.0 * (observed - mean[j]) / observed
            rows.append(
                RollupRow(
                    group_id=group_id,
                    year=year,
                    sum_mean=mean[j],
                    sum_lo95=lo[j],
                    sum_hi95=hi[j],
                    obs=observed,
                    pct_diff=pct,
                )
            )
    return rows


def naive_functions(linkage: LinkageService) -> np.ndarray:
    """Each county-year set to its own whole-grid statistic spread evenly; nan without one."""
    dataset = linkage.dataset
    naive = np.full((dataset.N, dataset.T), np.nan)
    for obs in dataset.observations:
        if obs.block in linkage.county_index and dataset.periods.length(obs.period) == dataset.T:
            share = obs.y if linkage.period_mean else obs.y / dataset.T
            naive[linkage.county_index[obs.block]] = share
    return naive


def truth_compare(
    f_draws: np.ndarray,
    linkage: LinkageService,
    f_true: np.ndarray,
    tiers: Mapping[str, str],
    interval: str = "equal-tail",
) -> List[TruthCompareRow]:
    """Coverage, RMSE and interval width against known functions, overall and per tier."""
    f_draws = np.asarray(f_draws, dtype=float)
    f_true = np.asarray(f_true, dtype=float)
    if f_true.shape != f_draws.shape[1:]:
        raise ValidationException(
            f"truth has shape {f_true.shape}, chain functions {f_draws.shape[1:]}", field="f_true"
        )
    mean = f_draws.mean(axis=0)
    lo, hi = credible_interval(f_draws, interval)
    naive = naive_functions(linkage)
    counties = list(linkage.dataset.graph.counties)
    groups = {ALL_TIERS: list(range(len(counties)))}
    for i, county in enumerate(counties):
        groups.setdefault(tiers[county], []).append(i)

    rows = []
    for tier, members in groups.items():
        truth = f_true[members]
        covered = (lo[members] <= truth) & (truth <= hi[members])
        baseline = naive[members]
        has_naive = np.isfinite(baseline)
        rmse_naive = None
        if has_naive.any():
            rmse_naive = float(np.sqrt(np.mean((baseline[has_naive] - truth[has_naive]) ** 2)))
        rows.append(
            TruthCompareRow(
                tier=tier,
                n_cells=truth.size,
                coverage=float(covered.mean()),
                rmse=float(np.sqrt(np.mean((mean[members] - truth) ** 2))),
                mean_interval_width=float(np.mean(hi[members] - lo[members])),
                rmse_naive=rmse_naive,
            )
        )
    return rows


def log_mean_density(loglik: np.ndarray) -> np.ndarray:
    """log of the posterior mean density of every observation."""
    loglik = np.atleast_2d(np.asarray(loglik, dtype=float))
    return logsumexp(loglik, axis=0) - math.log(loglik.shape[0])


def dic3(loglik: np.ndarray, observation_ids: Optional[List[str]] = None) -> Tuple[float, float, List[str]]:
    """DIC3 = -4 E[log f(y|theta)] + 2 sum_r log mean_g f(y_r|theta_g).

    Returns (dic3, mean deviance, ids of observations whose mean density is 0).
    """
    loglik = np.atleast_2d(np.asarray(loglik, dtype=float))
    expected = float(loglik.sum(axis=1).mean())
    log_fhat = log_mean_density(loglik)
    infinite = np.flatnonzero(~np.isfinite(log_fhat))
    ids = observation_ids or [str(r) for r in range(loglik.shape[1])]
    bad = [ids[r] for r in infinite]
    if bad:
        logger.warning(f"⚠️ Zero posterior mean density for {len(bad)} observations")
        value = math.inf
    else:
        value = -4.0 * expected + 2.0 * float(log_fhat.sum())
    return value, -2.0 * expected, bad


def harmonic_cpo(loglik: np.ndarray) -> np.ndarray:
    """log CPO_r as the harmonic mean of the per-draw densities."""
    loglik = np.atleast_2d(np.asarray(loglik, dtype=float))
    return math.log(loglik.shape[0]) - logsumexp(-loglik, axis=0)


def stabilized_cpo(
    loglik: np.ndarray,
    clip_percentile: float = 99.5,
    rng: Optional[np.random.Generator] = None,
    degenerate_mass: float = 0.99,
) -> Tuple[np.ndarray, np.ndarray]:
    """log CPO_r from importance weights 1/f clipped at a percentile.

    With an rng the draws are resampled by weight and the resampled densities
    averaged; without one the self-normalized expectation is returned.
    The second value flags observations whose largest weight dominates.
    """
    loglik = np.atleast_2d(np.asarray(loglik, dtype=float))
    G, R = loglik.shape
    log_w = -loglik
    cap = np.percentile(log_w, clip_percentile, axis=0, method="lower")
    log_w = np.minimum(log_w, cap)
    log_norm = log_w - logsumexp(log_w, axis=0)
    weights = np.exp(log_norm)
    degenerate = weights.max(axis=0) > degenerate_mass

    if rng is None:
        log_cpo = logsumexp(log_norm + loglik, axis=0)
    else:
        log_cpo = np.empty(R)
        for r in range(R):
            picks = rng.choice(G, size=G, replace=True, p=weights[:, r])
            log_cpo[r] = logsumexp(loglik[picks, r]) - math.log(G)
    return log_cpo, degenerate


def lpml(
    loglik: np.ndarray,
    clip_percentile: float = 99.5,
    rng: Optional[np.random.Generator] = None,
    observation_ids: Optional[List[str]] = None,
) -> Tuple[float, List[str]]:
    """Sum of log CPO and the ids whose importance weights degenerated."""
    log_cpo, degenerate = stabilized_cpo(loglik, clip_percentile, rng)
    ids = observation_ids or [str(r) for r in range(log_cpo.size)]
    flagged = [ids[r] for r in np.flatnonzero(degenerate)]
    if flagged:
        logger.warning(f"⚠️ Degenerate CPO weights for {len(flagged)} observations")
    return float(log_cpo.sum()), flagged


def fit_report(
    chain: ChainDraws, clip_percentile: float = 99.5, rng: Optional[np.random.Generator] = None
) -> FitReport:
    value, flagged = lpml(chain.loglik, clip_percentile, rng, chain.observation_ids)
    dic, dbar, infinite = dic3(chain.loglik, chain.observation_ids)
    return FitReport(
        neg_lpml=-value,
        dic3=dic,
        mean_deviance=dbar,
        infinite_observations=infinite,
        degenerate_cpo_observations=flagged,
        convergence=convergence_summary(chain),
    )


def holdout_compare(
    dataset: Dataset,
    county: str,
    run_a: ChainDraws,
    run_b: ChainDraws,
    interval: str = "equal-tail",
) -> HoldoutReport:
    """Per-year county means with and without its 1-year statistics."""
    linkage = LinkageService(dataset)
    if county not in linkage.county_index:
        raise NotFoundException(f"unknown county {county}", resource_type="county", resource_id=county)
    if not linkage.one_year_observations(county):
        raise ValidationException(f"county {county} has no 1-year observations", field="county")

    with_data = run_a.county(county)
    without = run_b.county(county)
    mean_a = with_data.mean(axis=0)
    mean_b = without.mean(axis=0)
    lo, hi = credible_interval(without, interval)
    rows = [
        HoldoutRow(
            year=year,
            mean_with=mean_a[j],
            mean_without=mean_b[j],
            lo95_without=lo[j],
            hi95_without=hi[j],
        )
        for j, year in enumerate(dataset.grid.years)
    ]
    scale = np.maximum(np.abs(mean_a), np.finfo(float).tiny)
    gap = float(np.max(np.abs(mean_a - mean_b) / scale))
    return HoldoutReport(county_id=county, rows=rows, max_relative_gap=gap)

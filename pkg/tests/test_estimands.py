import math

import numpy as np
import pytest
from scipy import stats

from multires.core.exceptions import NotFoundException, ValidationException
from multires.models.chain import ChainDraws
from multires.schemas.chain import ChainConfig
from multires.schemas.synth import SynthConfig
from multires.services.chain_store import read_chain
from multires.services.estimands import (
    credible_interval,
    dic3,
    equal_tail_interval,
    fit_report,
    fitted_functions,
    function_summary_rows,
    harmonic_cpo,
    holdout_compare,
    hpd_interval,
    lpml,
    naive_functions,
    pseudo_statistics,
    rollup,
    stabilized_cpo,
    truth_compare,
)
from multires.services.fit import FitService
from multires.services.linkage import LinkageService
from multires.services.synth import generate, make_holdout

F = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])


def make_chain(f, loglik=None, county_ids=("c1", "c2", "c3"), years=(2010, 2011, 2012)):
    f = np.asarray(f, dtype=float)
    G = f.shape[0]
    loglik = np.zeros((G, 2)) if loglik is None else np.asarray(loglik, dtype=float)
    return ChainDraws(
        county_ids=list(county_ids),
        years=list(years),
        observation_ids=[f"o{r}" for r in range(loglik.shape[1])],
        sweeps=np.arange(1, G + 1),
        alpha=np.ones(G),
        labels=np.zeros((G, f.shape[1]), dtype=int),
        f=f,
        loglik=loglik,
    )


def coefficients_for(f, P=2):
    """Coefficients whose intercept row reproduces f exactly."""
    B = np.zeros((f.shape[0], P, f.shape[1]))
    B[:, 0, :] = f
    return B


def test_equal_tail_interval_on_a_grid():
    lo, hi = equal_tail_interval(np.arange(101.0))

    assert lo == pytest.approx(2.5)
    assert hi == pytest.approx(97.5)


def test_hpd_is_shortest_and_holds_enough_draws(rng):
    draws = rng.exponential(size=4000)
    lo, hi = hpd_interval(draws)
    et_lo, et_hi = equal_tail_interval(draws)

    assert hi - lo < et_hi - et_lo
    assert lo < et_lo
    assert np.sum((draws >= lo) & (draws <= hi)) >= math.ceil(0.95 * draws.size)


def test_hpd_is_cellwise(rng):
    draws = rng.normal(size=(2000, 2, 3))
    lo, hi = hpd_interval(draws)

    assert lo.shape == hi.shape == (2, 3)
    assert np.all(lo < hi)


def test_unknown_interval_kind():
    with pytest.raises(ValidationException):
        credible_interval(np.zeros(40), "widest")


def test_too_few_draws_for_summaries():
    with pytest.raises(ValidationException, match="insufficient draws"):
        fitted_functions(np.zeros((10, 3, 3)), min_draws=30)


def test_function_summary_rows_filter_by_county(rng):
    chain = make_chain(F + rng.normal(scale=0.01, size=(50, 3, 3)))
    rows = function_summary_rows(chain, county="c2")

    assert [r.year for r in rows] == [2010, 2011, 2012]
    assert all(r.county_id == "c2" for r in rows)
    assert rows[1].mean == pytest.approx(5.0, abs=0.01)
    assert all(r.lo95 <= r.mean <= r.hi95 for r in rows)


def _pseudo(rows, county, block, period):
    (row,) = [
        r for r in rows if (r.county_id, r.block_id, r.period_id) == (county, block, period) and r.year == 2010
    ]
    return row


def test_pseudo_statistics_subtract_other_nested_terms(tiny_linkage):
    rows = pseudo_statistics(coefficients_for(F), tiny_linkage)

    own = _pseudo(rows, "c1", "c1", 4)
    assert own.value == pytest.approx(13.0 - (2.0 + 3.0))
    assert own.precision == pytest.approx(2.0)
    shared = _pseudo(rows, "c3", "S", 1)
    assert shared.value == pytest.approx(10.0 - (1.0 + 4.0))
    assert shared.precision == pytest.approx(0.5)
    # one row per link
    assert len(rows) == tiny_linkage.incidence.nnz


def test_single_cell_links_return_the_statistic_itself(tiny_linkage, rng):
    rows = pseudo_statistics(coefficients_for(rng.normal(size=(3, 3))), tiny_linkage, county="c1")

    assert _pseudo(rows, "c1", "c1", 1).value == 4.0


def test_pseudo_statistics_under_period_means(tiny_dataset):
    linkage = LinkageService(tiny_dataset, period_mean=True)
    rows = pseudo_statistics(coefficients_for(F), linkage, county="c1")

    own = _pseudo(rows, "c1", "c1", 4)
    assert own.value == pytest.approx(3.0 * (13.0 - (2.0 + 3.0) / 3.0))
    assert {r.county_id for r in rows} == {"c1"}


def test_rollup_compares_with_one_year_statistics(tiny_linkage):
    draws = np.tile(F, (40, 1, 1))
    rows = rollup(draws, tiny_linkage, {"c1": "c1", "c2": "g", "c3": "g"})
    by_key = {(r.group_id, r.year): r for r in rows}

    first = by_key[("c1", 2010)]
    assert first.sum_mean == pytest.approx(1.0)
    assert first.obs == 4.0
    assert first.pct_diff == pytest.approx(75.0)
    pair = by_key[("g", 2012)]
    assert pair.sum_mean == pytest.approx(15.0)
    assert pair.obs is None and pair.pct_diff is None
    assert pair.sum_lo95 == pytest.approx(15.0) and pair.sum_hi95 == pytest.approx(15.0)


def test_rollup_grouping_errors(tiny_linkage):
    draws = np.tile(F, (40, 1, 1))
    with pytest.raises(NotFoundException):
        rollup(draws, tiny_linkage, {"c1": "a", "c2": "a", "c3": "a", "c9": "a"})
    with pytest.raises(ValidationException, match="does not cover"):
        rollup(draws, tiny_linkage, {"c1": "a", "c2": "a"})


def test_dic3_of_a_degenerate_posterior_equals_mean_deviance():
    loglik = np.tile([-1.0, -2.5], (20, 1))
    value, dbar, bad = dic3(loglik)

    assert dbar == pytest.approx(7.0)
    assert value == pytest.approx(dbar)
    assert bad == []


def test_dic3_reports_zero_density_observations():
    loglik = np.array([[-1.0, -np.inf], [-1.0, -np.inf]])
    value, _, bad = dic3(loglik, ["a", "b"])

    assert value == math.inf
    assert bad == ["b"]


def test_harmonic_cpo_of_constant_density():
    np.testing.assert_allclose(harmonic_cpo(np.full((10, 3), -1.5)), -1.5)


def test_unclipped_stabilized_cpo_is_the_harmonic_mean(rng):
    loglik = rng.normal(-2.0, 0.5, size=(200, 4))
    exact, degenerate = stabilized_cpo(loglik, clip_percentile=100.0)

    np.testing.assert_allclose(exact, harmonic_cpo(loglik), rtol=1e-10)
    assert not degenerate.any()


def test_clipping_never_lowers_the_estimate(rng):
    loglik = rng.normal(-2.0, 2.0, size=(200, 4))
    clipped, _ = stabilized_cpo(loglik, clip_percentile=90.0)

    assert np.all(clipped >= harmonic_cpo(loglik) - 1e-12)


def test_clipping_removes_a_dominating_weight():
    loglik = np.zeros((10, 1))
    loglik[3, 0] = -1000.0

    _, unclipped = stabilized_cpo(loglik, clip_percentile=100.0)
    _, clipped = stabilized_cpo(loglik, clip_percentile=99.5)

    assert unclipped[0]
    assert not clipped[0]


def test_resampled_lpml_is_seeded_and_close_to_exact(rng):
    loglik = rng.normal(-1.0, 0.1, size=(500, 3))

    first, _ = lpml(loglik, rng=np.random.default_rng(4))
    again, _ = lpml(loglik, rng=np.random.default_rng(4))
    exact, flagged = lpml(loglik)

    assert first == again
    assert first == pytest.approx(exact, abs=0.05)
    assert flagged == []


def test_fit_report_signs():
    chain = make_chain(np.tile(F, (30, 1, 1)), loglik=np.full((30, 2), -1.0))
    report = fit_report(chain)

    assert report.neg_lpml == pytest.approx(2.0)
    assert report.dic3 == pytest.approx(4.0)
    assert report.mean_deviance == pytest.approx(4.0)


def test_holdout_compare(small_synth):
    dataset, _ = small_synth
    counties = list(dataset.graph.counties)
    years = list(dataset.grid.years)
    with_data = np.ones((40, len(counties), len(years)))
    without = 1.1 * np.ones_like(with_data)

    report = holdout_compare(
        dataset, counties[0], make_chain(with_data, county_ids=counties, years=years),
        make_chain(without, county_ids=counties, years=years),
    )

    assert report.county_id == counties[0]
    assert [r.year for r in report.rows] == years
    assert report.max_relative_gap == pytest.approx(0.1)


def test_holdout_needs_one_year_data(small_synth):
    dataset, _ = small_synth
    chain = make_chain(
        np.ones((40, dataset.N, dataset.T)),
        county_ids=dataset.graph.counties,
        years=dataset.grid.years,
    )

    with pytest.raises(ValidationException):
        holdout_compare(dataset, "c06", chain, chain)
    with pytest.raises(NotFoundException):
        holdout_compare(dataset, "c99", chain, chain)


def test_naive_functions_spread_the_full_period(tiny_linkage):
    naive = naive_functions(tiny_linkage)

    np.testing.assert_allclose(naive[0], 13.0 / 3)
    np.testing.assert_allclose(naive[1], 3.0)
    assert np.isnan(naive[2]).all()


def test_truth_compare_by_hand(tiny_linkage):
    f_true = np.zeros((3, 3))
    spread = np.array([-1.0, 0.0, 1.0])[:, None, None]
    draws = np.zeros((3, 3, 3)) + spread
    draws[:, 2, :] += 5.0

    tiers = {"c1": "one_year", "c2": "five_year", "c3": "five_year"}
    rows = truth_compare(draws, tiny_linkage, f_true, tiers)
    by_tier = {row.tier: row for row in rows}

    assert [row.tier for row in rows] == ["all", "one_year", "five_year"]
    assert by_tier["all"].n_cells == 9
    assert by_tier["all"].coverage == pytest.approx(6 / 9)
    assert by_tier["all"].rmse == pytest.approx(math.sqrt(75 / 9))
    assert by_tier["all"].mean_interval_width == pytest.approx(1.9)
    assert by_tier["all"].rmse_naive == pytest.approx(math.sqrt((3 * 169 / 9 + 3 * 9) / 6))
    assert by_tier["one_year"].coverage == 1.0
    assert by_tier["one_year"].rmse == pytest.approx(0.0)
    assert by_tier["one_year"].rmse_naive == pytest.approx(13.0 / 3)
    assert by_tier["five_year"].coverage == pytest.approx(0.5)
    assert by_tier["five_year"].rmse == pytest.approx(math.sqrt(75 / 6))
    assert by_tier["five_year"].rmse_naive == pytest.approx(3.0)


def test_truth_compare_without_any_baseline(tiny_linkage):
    tiers = {"c1": "a", "c2": "a", "c3": "b"}
    rows = truth_compare(np.zeros((4, 3, 3)), tiny_linkage, np.zeros((3, 3)), tiers)

    assert rows[-1].tier == "b"
    assert rows[-1].rmse_naive is None


def test_truth_compare_checks_the_shape(tiny_linkage):
    tiers = {"c1": "a", "c2": "a", "c3": "a"}
    with pytest.raises(ValidationException, match="shape"):
        truth_compare(np.zeros((4, 3, 3)), tiny_linkage, np.zeros((3, 2)), tiers)


def test_dic3_by_hand():
    loglik = np.array([[-1.0, -2.0], [-3.0, -4.0]])
    value, dbar, _ = dic3(loglik)

    log_fhat = math.log((math.exp(-1) + math.exp(-3)) / 2) + math.log((math.exp(-2) + math.exp(-4)) / 2)
    assert dbar == pytest.approx(10.0)
    assert value == pytest.approx(20.0 + 2.0 * log_fhat)


def test_lpml_matches_the_closed_form_normal_cpo():
    rng = np.random.default_rng(77)
    n, prior_var, G = 20, 4.0, 4000
    y = rng.normal(1.5, 1.0, size=n)
    precision = 1.0 / prior_var + n
    theta = rng.normal(y.sum() / precision, math.sqrt(1.0 / precision), size=G)
    loglik = stats.norm.logpdf(y[None, :], loc=theta[:, None], scale=1.0)

    loo_precision = 1.0 / prior_var + n - 1
    loo_mean = (y.sum() - y) / loo_precision
    exact = stats.norm.logpdf(y, loc=loo_mean, scale=np.sqrt(1.0 + 1.0 / loo_precision)).sum()

    value, flagged = lpml(loglik)
    assert value == pytest.approx(exact, rel=0.05)
    assert flagged == []


def run_fit(dataset, out_dir, n_burn=200, n_keep=200, seed=5):
    config = ChainConfig(n_burn=n_burn, n_keep=n_keep, thin=1, seed=seed, progress_every=1000)
    FitService(dataset, config, out_dir).run()
    return read_chain(out_dir)


RECOVERY = SynthConfig(n_counties=8, T=5, P=2, n_super_blocks=2, seed=19)


def check_recovery(dataset, truth, chain, min_coverage):
    rows = truth_compare(chain.f, LinkageService(dataset), truth.f, truth.tiers)
    overall = rows[0]

    assert overall.tier == "all"
    assert overall.coverage >= min_coverage
    assert overall.rmse < overall.rmse_naive


def test_functions_are_recovered_on_a_small_synthetic_set(tmp_path):
    dataset, truth = generate(RECOVERY)
    chain = run_fit(dataset, tmp_path)

    check_recovery(dataset, truth, chain, min_coverage=0.75)


@pytest.mark.slow
def test_functions_are_recovered_on_the_default_synthetic_set(tmp_path):
    dataset, truth = generate(SynthConfig(seed=19))
    chain = run_fit(dataset, tmp_path, n_burn=2000, n_keep=1000)

    check_recovery(dataset, truth, chain, min_coverage=0.85)


def test_rollup_agrees_with_the_super_block_statistics(tmp_path):
    dataset, _ = generate(RECOVERY)
    chain = run_fit(dataset, tmp_path)
    grouping = {c: b for b in ("S1", "S2") for c in dataset.graph.membership[b]}

    rows = rollup(chain.f, LinkageService(dataset), grouping)
    compared = [row for row in rows if row.obs is not None]
    assert len(compared) == 10
    for row in compared:
        assert abs(row.sum_mean - row.obs) < 2.0
        assert row.sum_lo95 < row.sum_mean < row.sum_hi95


def test_holding_out_one_year_data_moves_the_county_little(tmp_path):
    dataset, _ = generate(RECOVERY)
    with_data = run_fit(dataset, tmp_path / "with")
    without = run_fit(make_holdout(dataset, "c01"), tmp_path / "without")

    report = holdout_compare(dataset, "c01", with_data, without)
    inside = [
        abs(row.mean_with - row.mean_without) <= (row.hi95_without - row.lo95_without) / 2
        for row in report.rows
    ]
    assert sum(inside) >= 4

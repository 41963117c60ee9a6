import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from multires.core.exceptions import ConflictException, NotFoundException, ValidationException
from multires.core.parallel import next_key, substream
from multires.models.chain import ChainDraws
from multires.models.linkage import Dataset, YearGrid
from multires.models.state import ClusterLocation, SamplerMode
from multires.schemas.linkage import DatasetPaths, Observation
from multires.schemas.mixture import BaseMeasure
from multires.schemas.synth import SynthConfig
from multires.services.linkage import LinkageService, acs_period_table, build_graph, write_dataset
from multires.services.mixture import coefficient_prior, draw_location

logger = logging.getLogger(__name__)

ONE_YEAR, THREE_YEAR, FIVE_YEAR = "one_year", "three_year", "five_year"
FIVE_YEAR_FAR = "five_year_far"
FAR_BLOCK = "F1"


@dataclass(frozen=True, eq=False)
class GroundTruth:
    B: np.ndarray
    f: np.ndarray
    labels: np.ndarray
    locations: Tuple[ClusterLocation, ...]
    means: np.ndarray
    tiers: Dict[str, str]


def tier_counts(config: SynthConfig) -> Tuple[int, int, int]:
    N = config.n_counties
    n1 = int(round(N * config.size_tiers.one_year))
    n3 = int(round(N * config.size_tiers.three_year))
    n1 = min(n1, N)
    n3 = min(n3, N - n1)
    return n1, n3, N - n1 - n3


def county_ids(n: int) -> List[str]:
    width = max(2, len(str(n)))
    return [f"c{i:0{width}d}" for i in range(1, n + 1)]


def _truth_locations(config: SynthConfig, rng: np.random.Generator) -> List[ClusterLocation]:
    base = BaseMeasure(p=config.P)
    locations = []
    for m in range(config.n_clusters):
        drawn = draw_location(base, SamplerMode.BASELINE, rng)
        if config.truth_kappa is not None:
            kappa = np.array(config.truth_kappa, dtype=float)
            kappa[0] *= config.kappa1_spread ** m
            drawn.kappa = kappa
        if config.truth_lambda is not None:
            drawn.lambda_y = config.truth_lambda * np.eye(config.P)
        locations.append(drawn)
    return locations


def _predictors(config: SynthConfig, grid: YearGrid, rng: np.random.Generator) -> np.ndarray:
    """Intercept row plus smooth positive curves level * exp(a1 t + a2 t^2)."""
    X = np.ones((config.P, grid.T))
    t = grid.time_points - grid.time_points.mean()
    for p in range(1, config.P):
        a1 = rng.normal(0.0, 0.1)
        a2 = rng.normal(0.0, 0.02)
        level = config.predictor_level * math.exp(rng.normal(0.0, 0.5))
        X[p] = level * np.exp(a1 * t + a2 * t * t)
    return X


def _published_periods(tier: str, periods) -> List[int]:
    if tier == ONE_YEAR:
        return list(periods.period_ids)
    if tier == THREE_YEAR:
        return [q for q in periods.period_ids if periods.length(q) >= 3]
    return [q for q in periods.period_ids if periods.length(q) == periods.T]


def _noisy(mean: float, unit: float, noise_scale: float, rng: np.random.Generator) -> Tuple[float, float]:
    y = mean + math.sqrt(noise_scale * unit) * rng.standard_normal()
    return y, noise_scale * unit if noise_scale > 0 else unit


def generate(config: SynthConfig, rng: Optional[np.random.Generator] = None) -> Tuple[Dataset, GroundTruth]:
    """Dataset with ACS-like publication tiers and its generating truth."""
    rng = rng or np.random.default_rng(config.seed)
    N, T, P = config.n_counties, config.T, config.P
    counties = county_ids(N)
    grid = YearGrid(years=tuple(range(config.first_year, config.first_year + T)))
    periods = acs_period_table(T)

    n1, n3, n5 = tier_counts(config)
    n_far = int(round(n5 * config.far_fraction))
    bounds = ((n1, ONE_YEAR), (n1 + n3, THREE_YEAR), (N - n_far, FIVE_YEAR), (N, FIVE_YEAR_FAR))
    tiers = {c: next(tier for bound, tier in bounds if i < bound) for i, c in enumerate(counties)}
    near = [i for i, c in enumerate(counties) if tiers[c] != FIVE_YEAR_FAR]
    if config.n_super_blocks > len(near):
        raise ValidationException(
            f"{config.n_super_blocks} super-blocks cannot aggregate {len(near)} near counties",
            field="n_super_blocks",
        )

    membership: Dict[str, Tuple[str, ...]] = {c: (c,) for c in counties}
    publishes: Dict[str, List[int]] = {c: _published_periods(tiers[c], periods) for c in counties}
    one_year_periods = [q for q in periods.period_ids if periods.length(q) == 1]
    if config.n_super_blocks:
        for k, chunk in enumerate(np.array_split(np.array(near), config.n_super_blocks), start=1):
            block = f"S{k}"
            membership[block] = tuple(counties[i] for i in chunk)
            publishes[block] = one_year_periods
    if n_far:
        membership[FAR_BLOCK] = tuple(c for c in counties if tiers[c] != FIVE_YEAR)
        publishes[FAR_BLOCK] = one_year_periods
    if not any(publishes.values()):
        raise ValidationException("synthetic pattern publishes no observations")

    key = next_key(rng)
    locations = _truth_locations(config, substream(key, 0))
    labels = np.arange(N) % config.n_clusters
    X = np.stack([_predictors(config, grid, substream(key, 1, i)) for i in range(N)])
    B = np.stack(
        [
            coefficient_prior(locations[labels[i]], grid, jitter=1e-8).rvs(substream(key, 2, i))
            for i in range(N)
        ]
    )
    f = np.einsum("npt,npt->nt", X, B)

    index = {c: i for i, c in enumerate(counties)}
    noise = substream(key, 3)
    observations, means = [], []
    for block, members in membership.items():
        rows = [index[c] for c in members]
        for q in publishes[block]:
            years = periods.year_indices(q)
            mean = float(f[np.ix_(rows, years)].sum())
            unit = config.variance_unit / (len(rows) * len(years) ** 2)
            y, sigma2 = _noisy(mean, unit, config.noise_scale, noise)
            observations.append(Observation(block=block, period=q, y=y, sigma2=sigma2))
            means.append(mean)

    dataset = Dataset(
        grid=grid,
        periods=periods,
        graph=build_graph(counties, membership, observations),
        observations=tuple(observations),
        predictors=X,
    )
    truth = GroundTruth(
        B=B, f=f, labels=labels, locations=tuple(locations), means=np.array(means), tiers=tiers
    )
    logger.info(
        f"✅ Synthetic dataset: N={N}, {dataset.graph.B} blocks, {dataset.R} observations"
    )
    return dataset, truth


def county_tiers(dataset: Dataset) -> Dict[str, str]:
    """Publication tier of each county, read off its own block and its super-blocks.

    A 5-year county is far when every super-block holding it is at least
    twice the median super-block size, or when it sits in none.
    """
    graph, periods = dataset.graph, dataset.periods
    supers = {b: len(m) for b, m in graph.membership.items() if b not in graph.counties}
    median = float(np.median(list(supers.values()))) if supers else 0.0
    tiers = {}
    for county in graph.counties:
        lengths = {periods.length(q) for q in graph.published_periods.get(county, ())}
        if 1 in lengths:
            tiers[county] = ONE_YEAR
        elif any(1 < length < dataset.T for length in lengths):
            tiers[county] = THREE_YEAR
        else:
            sizes = [size for b, size in supers.items() if county in graph.membership[b]]
            far = not sizes or min(sizes) >= 2.0 * median
            tiers[county] = FIVE_YEAR_FAR if far else FIVE_YEAR
    return tiers


def posterior_locations(chain: ChainDraws, P: int) -> List[ClusterLocation]:
    """Per-county posterior means of kappa and Lambda_y over the retained draws."""
    if not chain.cluster_rows:
        raise NotFoundException(
            "🔍 clusters.csv is missing; truth from a fit needs the cluster draws",
            resource_type="chain",
            resource_id="clusters.csv",
        )
    rows = {(int(r["draw"]), int(r["cluster"])): r for r in chain.cluster_rows}
    lambda_columns = [f"lambda_y_{a + 1}{b + 1}" for a in range(P) for b in range(P)]
    if lambda_columns[-1] not in chain.cluster_rows[0]:
        raise ConflictException(
            f"chain clusters do not carry a {P} x {P} Lambda_y", conflicting_field="P"
        )
    N = len(chain.county_ids)
    kappa = np.zeros((N, 3))
    lambda_y = np.zeros((N, P, P))
    for g in range(chain.G):
        for i in range(N):
            row = rows[(g + 1, int(chain.labels[g, i]))]
            kappa[i] += [row["kappa1"], row["kappa2"], row["kappa3"]]
            lambda_y[i] += np.array([row[c] for c in lambda_columns]).reshape(P, P)
    return [
        ClusterLocation(lambda_y=lambda_y[i] / chain.G, kappa=kappa[i] / chain.G) for i in range(N)
    ]


def generate_from_fit(
    dataset: Dataset,
    chain: ChainDraws,
    config: SynthConfig,
    rng: Optional[np.random.Generator] = None,
    period_mean: bool = False,
) -> Tuple[Dataset, GroundTruth]:
    """Synthetic copy of a fitted dataset: same nesting, predictors and variances,
    coefficients drawn from the posterior-mean covariance of each county's cluster."""
    if chain.county_ids != list(dataset.graph.counties):
        raise ConflictException("chain counties do not match the dataset", conflicting_field="county_id")
    rng = rng or np.random.default_rng(config.seed)
    grid = dataset.grid
    locations = posterior_locations(chain, dataset.P)
    key = next_key(rng)
    B = np.stack(
        [
            coefficient_prior(location, grid, jitter=1e-8).rvs(substream(key, 2, i))
            for i, location in enumerate(locations)
        ]
    )
    f = np.einsum("npt,npt->nt", dataset.predictors, B)

    means = LinkageService(dataset, period_mean=period_mean).fitted_sums(f)
    noise = substream(key, 3)
    observations = []
    for obs, mean in zip(dataset.observations, means):
        y, sigma2 = _noisy(float(mean), obs.sigma2, config.noise_scale, noise)
        observations.append(Observation(block=obs.block, period=obs.period, y=y, sigma2=sigma2))

    synthetic = Dataset(
        grid=grid,
        periods=dataset.periods,
        graph=dataset.graph,
        observations=tuple(observations),
        predictors=dataset.predictors,
        has_intercept=dataset.has_intercept,
    )
    truth = GroundTruth(
        B=B,
        f=f,
        labels=np.arange(dataset.N),
        locations=tuple(locations),
        means=np.asarray(means),
        tiers=county_tiers(dataset),
    )
    logger.info(f"✅ Synthetic copy of a fit: N={dataset.N}, {synthetic.R} observations")
    return synthetic, truth


def make_holdout(dataset: Dataset, county: str) -> Dataset:
    """Copy of the dataset without the county's own 1-year statistics."""
    if county in dataset.held_out:
        return dataset
    if county not in dataset.graph.counties:
        raise NotFoundException(
            f"🔍 unknown county {county}", resource_type="county", resource_id=county
        )
    periods = dataset.periods
    dropped = [
        o for o in dataset.observations if o.block == county and periods.length(o.period) == 1
    ]
    if county not in dataset.graph.membership or not dropped:
        raise ValidationException(
            f"county {county} is not eligible for holdout: no own block with 1-year data",
            field="county",
        )
    kept = tuple(o for o in dataset.observations if o not in dropped)
    membership = dict(dataset.graph.membership)
    logger.info(f"✂️ Holding out {len(dropped)} 1-year observations of county {county}")
    return Dataset(
        grid=dataset.grid,
        periods=periods,
        graph=build_graph(dataset.graph.counties, membership, kept),
        observations=kept,
        predictors=dataset.predictors,
        has_intercept=dataset.has_intercept,
        held_out=dataset.held_out + (county,),
    )


def write_truth(truth: GroundTruth, dataset: Dataset, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [
        (county, year, truth.f[i, j])
        for i, county in enumerate(dataset.graph.counties)
        for j, year in enumerate(dataset.grid.years)
    ]
    truth_path = out_dir / "truth.csv"
    pd.DataFrame(rows, columns=["county_id", "year", "f_true"]).to_csv(
        truth_path, index=False, float_format="%.17g"
    )
    labels_path = out_dir / "truth_labels.csv"
    pd.DataFrame(
        {
            "county_id": list(dataset.graph.counties),
            "label": truth.labels + 1,
            "tier": [truth.tiers[c] for c in dataset.graph.counties],
        }
    ).to_csv(labels_path, index=False)
    return truth_path, labels_path


def read_truth(truth_dir: Union[str, Path], dataset: Dataset) -> Tuple[np.ndarray, Dict[str, str]]:
    """(N, T) true functions in dataset order and the tier of each county."""
    truth_dir = Path(truth_dir)
    frames = {}
    for name, columns in (
        ("truth.csv", ["county_id", "year", "f_true"]),
        ("truth_labels.csv", ["county_id", "tier"]),
    ):
        path = truth_dir / name
        if not path.exists():
            raise NotFoundException(
                f"🔍 missing truth file: {path}", resource_type="truth", resource_id=str(path)
            )
        frame = pd.read_csv(path, dtype={"county_id": str})
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise ValidationException(
                f"schema violation in {name}: missing column(s) {', '.join(missing)}", field=missing[0]
            )
        frames[name] = frame

    table = frames["truth.csv"].pivot_table(index="county_id", columns="year", values="f_true")
    counties, years = list(dataset.graph.counties), list(dataset.grid.years)
    try:
        f_true = table.loc[counties, years].to_numpy(dtype=float)
    except KeyError as exc:
        raise ValidationException(f"truth.csv does not cover the dataset: {exc}", field="county_id")
    if not np.isfinite(f_true).all():
        raise ValidationException("truth.csv does not cover every county-year", field="f_true")
    tiers = dict(zip(frames["truth_labels.csv"]["county_id"], frames["truth_labels.csv"]["tier"]))
    unknown = [c for c in counties if c not in tiers]
    if unknown:
        raise ValidationException(f"truth_labels.csv has no tier for county {unknown[0]}", field="tier")
    return f_true, {c: tiers[c] for c in counties}


def simulate(
    config: SynthConfig,
    out_dir: Union[str, Path],
    truth_from: Optional[Tuple[Dataset, ChainDraws]] = None,
    period_mean: bool = False,
) -> DatasetPaths:
    """Generate and write the bundle plus truth files.

    With truth_from = (dataset, chain) the bundle copies the fitted dataset.
    """
    if truth_from is None:
        dataset, truth = generate(config)
    else:
        dataset, truth = generate_from_fit(*truth_from, config, period_mean=period_mean)
    paths = write_dataset(dataset, out_dir)
    write_truth(truth, dataset, out_dir)
    return paths

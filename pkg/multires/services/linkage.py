import hashlib
import logging
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy import sparse

from multires.core.exceptions import NotFoundException, ValidationException
from multires.models.linkage import Dataset, LinkageGraph, PeriodTable, YearGrid
from multires.schemas.linkage import DatasetPaths, Observation

logger = logging.getLogger(__name__)

HEADER_LINES = 1


@lru_cache(maxsize=32)
def _acs_incidence(T: int) -> Tuple[Tuple[int, ...], ...]:
    rows = [tuple(int(j == k) for k in range(T)) for j in range(T)]
    if T >= 4:
        rows += [tuple(int(s <= k < s + 3) for k in range(T)) for s in range(T - 2)]
    rows.append(tuple(1 for _ in range(T)))
    return tuple(rows)


def acs_period_table(T: int) -> PeriodTable:
    """1-year periods, rolling 3-year periods and one period over the whole grid.

    For T = 5 this is the nine-row 2008-2012 table: q = 1..5 single years,
    q = 6..8 the three-year windows, q = 9 all five years.
    """
    return PeriodTable(incidence=np.array(_acs_incidence(T), dtype=np.int8))


def _read_csv(path: Path, required: Sequence[str], kind: str, dtype=None) -> pd.DataFrame:
    if path is None or not Path(path).exists():
        raise NotFoundException(f"missing file: {path}", resource_type=kind, resource_id=str(path))
    frame = pd.read_csv(path, dtype=dtype, encoding="utf-8")
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ValidationException(
            f"schema violation in {Path(path).name}: missing column(s) {', '.join(missing)}",
            field=missing[0],
        )
    for column in required:
        bad = frame[column].isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ValidationException(
                f"schema violation in {Path(path).name}: empty {column} at line {row + 1 + HEADER_LINES}",
                field=column,
                row=row + 1 + HEADER_LINES,
            )
    return frame


def _integral(value, column: str, name: str, line: int) -> int:
    """Whole-number id or year; 2.0 passes, 1.5 and text do not."""
    try:
        number = float(value)
    except (TypeError, ValueError):
        number = float("nan")
    if not np.isfinite(number) or number != int(number):
        raise ValidationException(
            f"schema violation in {name}: {column} {value!r} is not a whole number at line {line}",
            field=column,
            row=line,
        )
    return int(number)


def _read_predictors(path: Path, intercept: bool) -> Tuple[List[str], List[int], np.ndarray]:
    frame = _read_csv(path, ["county_id", "year"], "predictors", dtype={"county_id": str})
    value_columns = [c for c in frame.columns if c not in ("county_id", "year")]
    if not value_columns and not intercept:
        raise ValidationException("schema violation in predictors.csv: no predictor columns")
    try:
        values = frame[value_columns].to_numpy(dtype=float)
    except ValueError as exc:
        raise ValidationException(f"schema violation in predictors.csv: {exc}")
    years_raw = [
        _integral(year, "year", "predictors.csv", row + 1 + HEADER_LINES)
        for row, year in enumerate(frame["year"])
    ]
    counties = list(dict.fromkeys(frame["county_id"].tolist()))
    years = sorted(set(int(y) for y in years_raw))
    county_at = {c: i for i, c in enumerate(counties)}
    year_at = {y: j for j, y in enumerate(years)}
    P = len(value_columns) + int(intercept)
    X = np.full((len(counties), P, len(years)), np.nan)
    filled = np.zeros((len(counties), len(years)), dtype=bool)
    for row, (county, year) in enumerate(zip(frame["county_id"], years_raw)):
        line = row + 1 + HEADER_LINES
        i, j = county_at[county], year_at[int(year)]
        if filled[i, j]:
            raise ValidationException(
                f"duplicate predictor row for county {county}, year {year} at line {line}",
                field="year",
                row=line,
            )
        if not np.isfinite(values[row]).all():
            raise ValidationException(
                f"missing predictor value at line {line}", field="predictors", row=line
            )
        filled[i, j] = True
        X[i, int(intercept):, j] = values[row]
    if not filled.all():
        i, j = np.argwhere(~filled)[0]
        raise ValidationException(
            f"missing predictor cell for county {counties[i]}, year {years[j]}",
            field="predictors",
        )
    if intercept:
        X[:, 0, :] = 1.0
    return counties, years, X


def _read_periods(path: Optional[Path], years: List[int]) -> PeriodTable:
    if path is None:
        return acs_period_table(len(years))
    frame = _read_csv(path, ["period_id", "year"], "periods")
    pairs = [
        (
            _integral(q, "period_id", "periods.csv", row + 1 + HEADER_LINES),
            _integral(year, "year", "periods.csv", row + 1 + HEADER_LINES),
        )
        for row, (q, year) in enumerate(zip(frame["period_id"], frame["year"]))
    ]
    period_ids = sorted(set(q for q, _ in pairs))
    incidence = np.zeros((len(period_ids), len(years)), dtype=np.int8)
    row_of = {q: r for r, q in enumerate(period_ids)}
    year_at = {y: j for j, y in enumerate(years)}
    for row, (q, year) in enumerate(pairs):
        if year not in year_at:
            line = row + 1 + HEADER_LINES
            raise ValidationException(
                f"dangling reference: period {q} names year {year} outside the grid at line {line}",
                field="year",
                row=line,
            )
        incidence[row_of[q], year_at[year]] = 1
    return PeriodTable(incidence=incidence, period_ids=tuple(period_ids))


def _read_links(path: Path, counties: List[str]) -> Dict[str, List[str]]:
    frame = _read_csv(
        path, ["block_id", "county_id"], "links", dtype={"block_id": str, "county_id": str}
    )
    known = set(counties)
    membership: Dict[str, List[str]] = {}
    seen = set()
    for row, (block, county) in enumerate(zip(frame["block_id"], frame["county_id"])):
        line = row + 1 + HEADER_LINES
        if county not in known:
            raise ValidationException(
                f"dangling reference: links.csv line {line} names unknown county {county}",
                field="county_id",
                row=line,
            )
        if (block, county) in seen:
            raise ValidationException(
                f"duplicate (block, county) pair ({block}, {county}) at line {line}",
                field="county_id",
                row=line,
            )
        seen.add((block, county))
        membership.setdefault(block, []).append(county)
    return membership


def _read_observations(path: Path, blocks: Dict[str, List[str]], periods: PeriodTable) -> List[Observation]:
    frame = _read_csv(
        path, ["block_id", "period_id", "y", "sigma2"], "obs", dtype={"block_id": str}
    )
    observations = []
    seen = set()
    for row, record in enumerate(frame.itertuples(index=False)):
        line = row + 1 + HEADER_LINES
        period = _integral(record.period_id, "period_id", "obs.csv", line)
        try:
            obs = Observation(
                block=record.block_id,
                period=period,
                y=float(record.y),
                sigma2=float(record.sigma2),
            )
        except (ValidationError, ValueError) as exc:
            reason = "non-positive variance" if "variance" in str(exc) else "schema violation"
            raise ValidationException(f"{reason} in obs.csv at line {line}", row=line)
        if obs.block not in blocks:
            raise ValidationException(
                f"dangling reference: obs.csv line {line} names unknown block {obs.block}",
                field="block_id",
                row=line,
            )
        if obs.period not in periods.period_ids:
            raise ValidationException(
                f"dangling reference: obs.csv line {line} names unknown period {obs.period}",
                field="period_id",
                row=line,
            )
        if (obs.block, obs.period) in seen:
            raise ValidationException(
                f"duplicate (b,q) = ({obs.block}, {obs.period}) at line {line}",
                field="period_id",
                row=line,
            )
        seen.add((obs.block, obs.period))
        observations.append(obs)
    return observations


def build_graph(
    counties: Sequence[str], membership: Dict[str, Sequence[str]], observations: Sequence[Observation]
) -> LinkageGraph:
    published: Dict[str, List[int]] = {}
    for obs in observations:
        published.setdefault(obs.block, []).append(obs.period)
    return LinkageGraph(
        counties=tuple(counties),
        blocks=tuple(membership),
        membership={b: tuple(m) for b, m in membership.items()},
        published_periods={b: tuple(sorted(q)) for b, q in published.items()},
    )


def load_dataset(
    paths: Union[DatasetPaths, str, Path],
    intercept: bool = True,
    time_points: Optional[Sequence[float]] = None,
) -> Dataset:
    """Read and validate a links/obs/predictors(/periods) bundle."""
    if not isinstance(paths, DatasetPaths):
        paths = DatasetPaths.from_directory(Path(paths))
    counties, years, X = _read_predictors(paths.predictors, intercept)
    grid = YearGrid(years=tuple(years), time_points=time_points)
    periods = _read_periods(paths.periods, years)
    membership = _read_links(paths.links, counties)
    observations = _read_observations(paths.obs, membership, periods)
    dataset = Dataset(
        grid=grid,
        periods=periods,
        graph=build_graph(counties, membership, observations),
        observations=tuple(observations),
        predictors=X,
        has_intercept=intercept,
    )
    logger.info(
        f"✅ Dataset loaded: N={dataset.N} counties, B={dataset.graph.B} blocks, "
        f"T={dataset.T}, Q={periods.Q}, {dataset.R} observations"
    )
    return dataset


def write_dataset(dataset: Dataset, out_dir: Union[str, Path]) -> DatasetPaths:
    """Write the bundle that load_dataset reads back."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = DatasetPaths(
        links=out_dir / "links.csv",
        obs=out_dir / "obs.csv",
        predictors=out_dir / "predictors.csv",
        periods=out_dir / "periods.csv",
    )
    links = [
        (block, county)
        for block in dataset.graph.blocks
        for county in dataset.graph.membership[block]
    ]
    pd.DataFrame(links, columns=["block_id", "county_id"]).to_csv(paths.links, index=False)
    pd.DataFrame(
        [(o.block, o.period, o.y, o.sigma2) for o in dataset.observations],
        columns=["block_id", "period_id", "y", "sigma2"],
    ).to_csv(paths.obs, index=False, float_format="%.17g")
    periods = dataset.periods
    pd.DataFrame(
        [
            (q, dataset.grid.years[j])
            for q in periods.period_ids
            for j in periods.year_indices(q)
        ],
        columns=["period_id", "year"],
    ).to_csv(paths.periods, index=False)
    start = 1 if dataset.has_intercept else 0
    columns = [f"p{k}" for k in range(1, dataset.P - start + 1)]
    rows = []
    for i, county in enumerate(dataset.graph.counties):
        for j, year in enumerate(dataset.grid.years):
            rows.append([county, year, *dataset.predictors[i, start:, j]])
    pd.DataFrame(rows, columns=["county_id", "year", *columns]).to_csv(
        paths.predictors, index=False, float_format="%.17g"
    )
    return paths


def dataset_fingerprint(paths: DatasetPaths) -> Dict[str, str]:
    """SHA-256 of every bundle file, keyed by file name."""
    hashes = {}
    for path in (paths.links, paths.obs, paths.predictors, paths.periods):
        if path is not None and Path(path).exists():
            hashes[Path(path).name] = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return hashes


class LinkageService:
    """Forward and reverse indices between observations and county-years."""

    def __init__(self, dataset: Dataset, period_mean: bool = False):
        self.dataset = dataset
        self.period_mean = period_mean
        self.county_index = {c: i for i, c in enumerate(dataset.graph.counties)}
        self.block_members = {
            b: np.array([self.county_index[c] for c in members], dtype=int)
            for b, members in dataset.graph.membership.items()
        }
        self.obs_index = {(o.block, o.period): r for r, o in enumerate(dataset.observations)}
        self.y = np.array([o.y for o in dataset.observations], dtype=float)
        self.sigma2 = np.array([o.sigma2 for o in dataset.observations], dtype=float)

    @property
    def X(self) -> np.ndarray:
        return self.dataset.predictors

    def years_of_period(self, q: int) -> Tuple[int, ...]:
        years = self.dataset.grid.years
        return tuple(years[j] for j in self.dataset.periods.year_indices(q))

    def nested_cells(self, block: str, q: int) -> List[Tuple[str, int]]:
        if (block, q) not in self.obs_index:
            raise NotFoundException(
                f"block {block} publishes no statistic for period {q}",
                resource_type="observation",
                resource_id=f"{block}:{q}",
            )
        years = self.years_of_period(q)
        return [(county, year) for county in self.dataset.graph.membership[block] for year in years]

    def links_of_cell(self, county: str, year: int) -> List[Tuple[str, int]]:
        if county not in self.county_index:
            raise NotFoundException(
                f"unknown county {county}", resource_type="county", resource_id=county
            )
        j = self.dataset.grid.index_of(year)
        i = self.county_index[county]
        rows = self.county_rows[i]
        local = self.county_local[i]
        obs = self.dataset.observations
        return [(obs[r].block, obs[r].period) for r, w in zip(rows, local[:, j]) if w != 0]

    @cached_property
    def incidence(self) -> sparse.csr_matrix:
        """Observation x (county*T + year) weights of the multiresolution sum."""
        T = self.dataset.T
        rows, cols, weights = [], [], []
        for r, obs in enumerate(self.dataset.observations):
            years = self.dataset.periods.year_indices(obs.period)
            weight = 1.0 / len(years) if self.period_mean else 1.0
            for i in self.block_members[obs.block]:
                for j in years:
                    rows.append(r)
                    cols.append(i * T + j)
                    weights.append(weight)
        return sparse.csr_matrix(
            (weights, (rows, cols)), shape=(self.dataset.R, self.dataset.N * T)
        )

    @cached_property
    def _column_view(self) -> sparse.csc_matrix:
        return self.incidence.tocsc()

    @cached_property
    def county_rows(self) -> List[np.ndarray]:
        T = self.dataset.T
        csc = self._column_view
        rows = []
        for i in range(self.dataset.N):
            block = csc[:, i * T:(i + 1) * T]
            rows.append(np.unique(block.indices))
        return rows

    @cached_property
    def county_local(self) -> List[np.ndarray]:
        """Dense (links x T) incidence of each county's own cells."""
        T = self.dataset.T
        csc = self._column_view
        return [
            csc[rows, i * T:(i + 1) * T].toarray()
            for i, rows in enumerate(self.county_rows)
        ]

    def fitted_sums(self, f: np.ndarray) -> np.ndarray:
        """Sum of nested county-year functions for every observation."""
        return self.incidence @ np.asarray(f, dtype=float).ravel()

    def one_year_observations(self, county: str) -> List[int]:
        """Observation rows on the county's own block with single-year periods."""
        if county not in self.dataset.graph.membership:
            return []
        periods = self.dataset.periods
        return [
            r
            for r, o in enumerate(self.dataset.observations)
            if o.block == county and periods.length(o.period) == 1
        ]

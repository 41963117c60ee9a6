from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from multires.core.exceptions import ValidationException
from multires.schemas.linkage import Observation


@dataclass(frozen=True, eq=False)
class YearGrid:
    years: Tuple[int, ...]
    time_points: Optional[np.ndarray] = None

    def __post_init__(self):
        years = tuple(int(y) for y in self.years)
        if len(years) < 2:
            raise ValidationException("year grid needs at least two years", field="year")
        if any(b <= a for a, b in zip(years, years[1:])):
            raise ValidationException("years must be strictly increasing", field="year")
        object.__setattr__(self, "years", years)
        if self.time_points is None:
            points = np.arange(len(years), dtype=float)
        else:
            points = np.asarray(self.time_points, dtype=float)
            if points.shape != (len(years),):
                raise ValidationException(
                    "time_points must have one coordinate per year", field="time_points"
                )
        points.setflags(write=False)
        object.__setattr__(self, "time_points", points)

    @property
    def T(self) -> int:
        return len(self.years)

    def index_of(self, year: int) -> int:
        try:
            return self.years.index(int(year))
        except ValueError:
            raise ValidationException(f"year {year} is not on the grid", field="year")


@dataclass(frozen=True, eq=False)
class PeriodTable:
    incidence: np.ndarray
    period_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        incidence = np.asarray(self.incidence, dtype=np.int8)
        if incidence.ndim != 2:
            raise ValidationException("period incidence must be a Q x T matrix")
        if not np.isin(incidence, (0, 1)).all():
            raise ValidationException("period incidence must be binary")
        ids = tuple(int(q) for q in self.period_ids) or tuple(
            range(1, incidence.shape[0] + 1)
        )
        if len(ids) != incidence.shape[0] or len(set(ids)) != len(ids):
            raise ValidationException("period ids must be unique, one per row")
        for q, row in zip(ids, incidence):
            ones = np.flatnonzero(row)
            if ones.size == 0:
                raise ValidationException(f"period {q} links to no year", field="period_id")
            if ones[-1] - ones[0] + 1 != ones.size:
                raise ValidationException(
                    f"period {q} is not a contiguous run of years", field="period_id"
                )
        incidence.setflags(write=False)
        object.__setattr__(self, "incidence", incidence)
        object.__setattr__(self, "period_ids", ids)

    @property
    def Q(self) -> int:
        return self.incidence.shape[0]

    @property
    def T(self) -> int:
        return self.incidence.shape[1]

    def row_of(self, q: int) -> int:
        try:
            return self.period_ids.index(int(q))
        except ValueError:
            raise ValidationException(f"period {q} is out of range", field="period_id")

    def year_indices(self, q: int) -> np.ndarray:
        return np.flatnonzero(self.incidence[self.row_of(q)])

    def length(self, q: int) -> int:
        return int(self.incidence[self.row_of(q)].sum())


@dataclass(frozen=True, eq=False)
class LinkageGraph:
    counties: Tuple[str, ...]
    blocks: Tuple[str, ...]
    membership: Dict[str, Tuple[str, ...]]
    published_periods: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.counties)) != len(self.counties):
            raise ValidationException("duplicate county ids", field="county_id")
        county_set = set(self.counties)
        order = {c: i for i, c in enumerate(self.counties)}
        covered = set()
        membership = {}
        for block in self.blocks:
            members = self.membership.get(block, ())
            if not members:
                raise ValidationException(f"block {block} has no member counties", field="block_id")
            if len(set(members)) != len(members):
                raise ValidationException(
                    f"duplicate (block, county) pair in block {block}", field="county_id"
                )
            unknown = [c for c in members if c not in county_set]
            if unknown:
                raise ValidationException(
                    f"dangling reference: block {block} names unknown county {unknown[0]}",
                    field="county_id",
                )
            if block in county_set and tuple(members) != (block,):
                raise ValidationException(
                    f"county {block} published as a block must link to itself only",
                    field="block_id",
                )
            # county-major order follows the dataset's county order
            membership[block] = tuple(sorted(members, key=order.__getitem__))
            covered.update(members)
        missing = [c for c in self.counties if c not in covered]
        if missing:
            raise ValidationException(
                f"county {missing[0]} does not nest in any block", field="county_id"
            )
        object.__setattr__(self, "membership", membership)
        published = {b: tuple(self.published_periods.get(b, ())) for b in self.blocks}
        object.__setattr__(self, "published_periods", published)

    @property
    def N(self) -> int:
        return len(self.counties)

    @property
    def B(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True, eq=False)
class Dataset:
    grid: YearGrid
    periods: PeriodTable
    graph: LinkageGraph
    observations: Tuple[Observation, ...]
    predictors: np.ndarray
    has_intercept: bool = True
    held_out: Tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.predictors, dtype=float)
        N, T = self.graph.N, self.grid.T
        if X.ndim != 3 or X.shape[0] != N or X.shape[2] != T:
            raise ValidationException(
                f"predictors must be N x P x T = {N} x P x {T}, got {X.shape}",
                field="predictors",
            )
        if not np.isfinite(X).all():
            raise ValidationException("predictor matrix has missing cells", field="predictors")
        if self.has_intercept and not np.all(X[:, 0, :] == 1.0):
            raise ValidationException("intercept row must be all ones", field="predictors")
        if self.periods.T != T:
            raise ValidationException("period table and year grid disagree on T")
        blocks = set(self.graph.blocks)
        seen = set()
        for row, obs in enumerate(self.observations):
            if obs.block not in blocks:
                raise ValidationException(
                    f"dangling reference: observation names unknown block {obs.block}",
                    field="block_id",
                    row=row,
                )
            self.periods.row_of(obs.period)
            key = (obs.block, obs.period)
            if key in seen:
                raise ValidationException(
                    f"duplicate observation for block {obs.block}, period {obs.period}",
                    field="period_id",
                    row=row,
                )
            seen.add(key)
        X.setflags(write=False)
        object.__setattr__(self, "predictors", X)
        object.__setattr__(self, "observations", tuple(self.observations))

    @property
    def N(self) -> int:
        return self.graph.N

    @property
    def T(self) -> int:
        return self.grid.T

    @property
    def P(self) -> int:
        return self.predictors.shape[1]

    @property
    def R(self) -> int:
        return len(self.observations)

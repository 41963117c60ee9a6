from typing import List, Optional

from pydantic import BaseModel


class FunctionSummaryRow(BaseModel):
    county_id: str
    year: int
    mean: float
    lo95: float
    hi95: float


class PseudoStatistic(BaseModel):
    county_id: str
    year: int
    block_id: str
    period_id: int
    value: float
    precision: float


class RollupRow(BaseModel):
    group_id: str
    year: int
    sum_mean: float
    sum_lo95: float
    sum_hi95: float
    obs: Optional[float] = None
    pct_diff: Optional[float] = None


class ConvergenceRow(BaseModel):
    quantity: str
    ess: float
    geweke_z: Optional[float] = None


class FitReport(BaseModel):
    neg_lpml: float
    dic3: float
    mean_deviance: float
    infinite_observations: List[str] = []
    degenerate_cpo_observations: List[str] = []
    convergence: List[ConvergenceRow] = []


class HoldoutRow(BaseModel):
    year: int
    mean_with: float
    mean_without: float
    lo95_without: float
    hi95_without: float


class HoldoutReport(BaseModel):
    county_id: str
    rows: List[HoldoutRow]
    max_relative_gap: float


class TruthCompareRow(BaseModel):
    tier: str
    n_cells: int
    coverage: float
    rmse: float
    mean_interval_width: float
    rmse_naive: Optional[float] = None

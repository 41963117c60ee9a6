import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np


class SamplerMode(str, enum.Enum):
    BASELINE = "baseline"
    PPMX = "ppmx"


@dataclass
class ClusterLocation:
    """One occupied location of the Dirichlet process."""

    lambda_y: np.ndarray
    kappa: np.ndarray
    lambda_x: Optional[np.ndarray] = None
    tau_x: Optional[float] = None
    rho_x: Optional[float] = None

    def copy(self) -> "ClusterLocation":
        return ClusterLocation(
            lambda_y=self.lambda_y.copy(),
            kappa=self.kappa.copy(),
            lambda_x=None if self.lambda_x is None else self.lambda_x.copy(),
            tau_x=self.tau_x,
            rho_x=self.rho_x,
        )


@dataclass
class ClusterState:
    labels: np.ndarray
    locations: List[ClusterLocation]
    alpha: float
    mode: SamplerMode = SamplerMode.BASELINE

    @property
    def M(self) -> int:
        return len(self.locations)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.M)

    def members(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.labels == m)

    def check(self):
        """Labels dense in 0..M-1, every location occupied."""
        counts = self.counts
        assert counts.size == self.M, "labels reference a missing location"
        assert counts.sum() == self.labels.size, "cluster counts do not add up to N"
        assert np.all(counts >= 1), "empty cluster left after cleanup"


@dataclass
class CoefficientState:
    B: np.ndarray
    delta: Optional[np.ndarray] = None
    h_x: Optional[np.ndarray] = None

    def functions(self, X: np.ndarray) -> np.ndarray:
        """f[l, j] = x_lj' beta_lj for every county-year."""
        return np.einsum("npt,npt->nt", X, self.B)


@dataclass
class ResidualCache:
    """Current fitted sum for every observed (block, period)."""

    fitted: np.ndarray


@dataclass
class ChainState:
    coeffs: CoefficientState
    clusters: ClusterState
    cache: ResidualCache
    sweep: int = 0
    diagnostics: Dict[str, int] = field(default_factory=dict)

    def bump(self, counter: str, by: int = 1):
        self.diagnostics[counter] = self.diagnostics.get(counter, 0) + by

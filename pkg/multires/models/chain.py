from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


@dataclass
class ChainDraws:
    """Retained draws of one fit, as read back from the chain directory."""

    county_ids: List[str]
    years: List[int]
    observation_ids: List[str]
    sweeps: np.ndarray
    alpha: np.ndarray
    labels: np.ndarray
    f: np.ndarray
    loglik: np.ndarray
    bmean: Optional[np.ndarray] = None
    mode: str = "baseline"
    cluster_rows: List[dict] = field(default_factory=list)

    @property
    def G(self) -> int:
        return int(self.f.shape[0])

    @property
    def n_clusters(self) -> np.ndarray:
        return np.array([len(np.unique(s)) for s in self.labels], dtype=int)

    def county(self, county_id: str) -> np.ndarray:
        """(G, T) draws of one county's functions."""
        return self.f[:, self.county_ids.index(county_id), :]

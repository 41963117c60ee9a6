from .chain import ChainDraws
from .linkage import Dataset, LinkageGraph, PeriodTable, YearGrid
from .state import (
    ChainState,
    ClusterLocation,
    ClusterState,
    CoefficientState,
    ResidualCache,
    SamplerMode,
)

__all__ = [
    "ChainDraws",
    "Dataset",
    "LinkageGraph",
    "PeriodTable",
    "YearGrid",
    "ChainState",
    "ClusterLocation",
    "ClusterState",
    "CoefficientState",
    "ResidualCache",
    "SamplerMode",
]

from typing import Tuple

import numpy as np
from pydantic import BaseModel, PositiveFloat, field_validator


class RQParams(BaseModel):
    kappa1: PositiveFloat
    kappa2: PositiveFloat
    kappa3: PositiveFloat

    @classmethod
    def from_array(cls, values) -> "RQParams":
        kappa1, kappa2, kappa3 = (float(v) for v in values)
        return cls(kappa1=kappa1, kappa2=kappa2, kappa3=kappa3)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.kappa1, self.kappa2, self.kappa3)

    class Config:
        frozen = True


class CARParams(BaseModel):
    tau: PositiveFloat
    rho: float
    omega: np.ndarray

    @field_validator("rho")
    @classmethod
    def rho_in_unit_interval(cls, value: float) -> float:
        if not -1.0 < value < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        return value

    @field_validator("omega")
    @classmethod
    def omega_is_adjacency(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        if value.ndim != 2 or value.shape[0] != value.shape[1]:
            raise ValueError("omega must be square")
        if not np.allclose(value, value.T):
            raise ValueError("omega must be symmetric")
        if np.any(np.diag(value) != 0) or np.any(value < 0):
            raise ValueError("omega must be nonnegative with zero diagonal")
        return value

    @property
    def d(self) -> np.ndarray:
        """Diagonal degree matrix of omega."""
        return np.diag(self.omega.sum(axis=1))

    class Config:
        arbitrary_types_allowed = True

import numpy as np
from pydantic import BaseModel, PositiveFloat, PositiveInt


class BaseMeasure(BaseModel):
    """G0 over cluster locations: Wishart on precisions, gammas on scales."""

    p: PositiveInt
    kappa_a: PositiveFloat = 1.0
    kappa_b: PositiveFloat = 1.0
    tau_a: PositiveFloat = 1.0
    tau_b: PositiveFloat = 1.0
    rho_low: float = -1.0
    rho_high: float = 1.0

    @property
    def wishart_df(self) -> int:
        return self.p + 1

    @property
    def wishart_scale(self) -> np.ndarray:
        return np.eye(self.p)

    class Config:
        frozen = True

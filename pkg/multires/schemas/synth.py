from typing import List, Optional

from pydantic import BaseModel, Field, PositiveFloat, model_validator


class SizeTiers(BaseModel):
    one_year: float = Field(default=0.2, ge=0.0, le=1.0)
    three_year: float = Field(default=0.4, ge=0.0, le=1.0)
    five_year: float = Field(default=0.4, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def fractions_sum_to_one(self) -> "SizeTiers":
        total = self.one_year + self.three_year + self.five_year
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"tier fractions sum to {total}, expected 1")
        return self


class SynthConfig(BaseModel):
    n_counties: int = Field(default=30, ge=2)
    T: int = Field(default=5, ge=2)
    P: int = Field(default=3, ge=1)
    n_super_blocks: int = Field(default=5, ge=0)
    size_tiers: SizeTiers = SizeTiers()
    # None draws per-cluster values from the base measure
    truth_kappa: Optional[List[PositiveFloat]] = [1.0, 1.0, 1.0]
    truth_lambda: Optional[PositiveFloat] = 1.0
    n_clusters: int = Field(default=1, ge=1)
    # cluster m uses kappa1 * kappa1_spread ** m
    kappa1_spread: PositiveFloat = 1.0
    noise_scale: float = Field(default=1.0, ge=0.0)
    # share of 5-year counties nested only in one large block with the 1- and 3-year counties
    far_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    variance_unit: PositiveFloat = 1.0
    predictor_level: PositiveFloat = 10.0
    first_year: int = 2008
    seed: int = 7

    @model_validator(mode="after")
    def kappa_has_three_components(self) -> "SynthConfig":
        if self.truth_kappa is not None and len(self.truth_kappa) != 3:
            raise ValueError("truth_kappa needs exactly three components")
        return self

from pathlib import Path
from typing import Optional

from pydantic import BaseModel, field_validator


class Observation(BaseModel):
    block: str
    period: int
    y: float
    sigma2: float

    @field_validator("y")
    @classmethod
    def y_finite(cls, value: float) -> float:
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("non-finite statistic")
        return value

    @field_validator("sigma2")
    @classmethod
    def sigma2_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("non-positive variance")
        return value

    class Config:
        frozen = True


class DatasetPaths(BaseModel):
    links: Path
    obs: Path
    predictors: Path
    periods: Optional[Path] = None

    @classmethod
    def from_directory(cls, directory: Path) -> "DatasetPaths":
        """Standard bundle layout; periods.csv is optional."""
        directory = Path(directory)
        periods = directory / "periods.csv"
        return cls(
            links=directory / "links.csv",
            obs=directory / "obs.csv",
            predictors=directory / "predictors.csv",
            periods=periods if periods.exists() else None,
        )

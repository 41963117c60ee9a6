from typing import Dict, List, Optional

from pydantic import BaseModel, Field, NonNegativeInt, PositiveFloat, PositiveInt

from multires.models.state import SamplerMode


class ChainConfig(BaseModel):
    n_burn: NonNegativeInt = 2000
    n_keep: PositiveInt = 1000
    thin: PositiveInt = 5
    seed: int = 20140101
    c_star: PositiveInt = 2
    mode: SamplerMode = SamplerMode.BASELINE
    slice_width: PositiveFloat = 1.0
    slice_max_steps: PositiveInt = 50
    jitter: float = Field(default=1e-8, ge=0.0)
    alpha_a: PositiveFloat = 1.0
    alpha_b: PositiveFloat = 1.0
    alpha_init: PositiveFloat = 1.0
    period_mean: bool = False
    cache_check_every: PositiveInt = 100
    progress_every: PositiveInt = 100
    workers: PositiveInt = 1

    @property
    def total_sweeps(self) -> int:
        return self.n_burn + self.n_keep * self.thin

    def is_retained(self, sweep: int) -> bool:
        """Whether completed sweep number `sweep` (1-based) is kept."""
        kept = sweep - self.n_burn
        return kept > 0 and kept % self.thin == 0

    @classmethod
    def from_settings(cls, settings, **overrides) -> "ChainConfig":
        fields = {name: getattr(settings, name) for name in cls.model_fields}
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**fields)

    def reproducibility_key(self) -> Dict[str, object]:
        """Fields that must match between a checkpoint and a resumed run."""
        data = self.model_dump(mode="json")
        data.pop("workers")
        data.pop("progress_every")
        return data


class SweepTiming(BaseModel):
    sweeps: int = 0
    mean_seconds: float = 0.0
    max_seconds: float = 0.0
    total_seconds: float = 0.0


class RunManifest(BaseModel):
    software: str
    version: str
    command: str
    config: Dict[str, object]
    seed: int
    input_hashes: Dict[str, str] = {}
    started_at: str
    wall_clock_seconds: float = 0.0
    timing: SweepTiming = SweepTiming()
    completed_sweeps: int = 0
    retained_draws: int = 0
    county_ids: List[str] = []
    has_intercept: bool = True
    resumed_from: Optional[str] = None

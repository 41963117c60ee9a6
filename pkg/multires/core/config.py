from typing import Any, Dict, Optional

from pydantic import Field
from pydantic_settings import BaseSettings

from multires import __version__


class Settings(BaseSettings):
    # App settings
    app_name: str = "Multires Small-Area Estimation"
    app_version: str = __version__
    debug: bool = Field(default=False, description="Enable debug mode")

    # Chain settings
    seed: int = Field(default=20140101, description="Master seed of the chain")
    n_burn: int = Field(default=2000, description="Burn-in sweeps")
    n_keep: int = Field(default=1000, description="Retained draws")
    thin: int = Field(default=5, description="Sweeps between retained draws")
    mode: str = Field(default="baseline", description="baseline or ppmx")
    c_star: int = Field(default=2, description="Auxiliary locations per county update")
    slice_width: float = Field(default=1.0, description="Initial slice bracket width")
    slice_max_steps: int = Field(default=50, description="Stepping-out budget")
    jitter: float = Field(default=1e-8, description="Relative diagonal jitter on C")
    alpha_a: float = Field(default=1.0, description="Gamma shape prior on alpha")
    alpha_b: float = Field(default=1.0, description="Gamma rate prior on alpha")
    alpha_init: float = Field(default=1.0, description="Starting concentration")
    period_mean: bool = Field(
        default=False, description="Average (not sum) county-years within a period"
    )
    cache_check_every: int = Field(
        default=100, description="Sweeps between residual cache drift checks"
    )
    progress_every: int = Field(default=100, description="Sweeps between progress logs")
    workers: int = Field(default=1, description="Worker threads for parallel stages")

    # Estimand settings
    cpo_clip_percentile: float = Field(
        default=99.5, description="Importance weight clip for CPO"
    )
    min_draws: int = Field(default=30, description="Minimum draws for intervals")
    interval: str = Field(default="equal-tail", description="equal-tail or hpd")

    # Logging settings
    log_level: str = Field(default="INFO", description="Logging level")
    log_format: str = Field(
        default="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        description="Log format string",
    )

    def with_overrides(self, overrides: Dict[str, Any]) -> "Settings":
        """Apply command-line flags on top of file/env settings, skipping unset ones."""
        update = {key: value for key, value in overrides.items() if value is not None}
        return self.model_copy(update=update)

    class Config:
        env_prefix = "MULTIRES_"
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False


# Global settings instance
settings = Settings()


def load_settings(config_file: Optional[str] = None) -> Settings:
    """Fresh settings from the environment, plus a flat key=value file when given."""
    if config_file:
        return Settings(_env_file=config_file)
    return Settings()

from typing import Any, Callable, Dict

import click
from pydantic import ValidationError

from multires.core.config import Settings, load_settings
from multires.core.exceptions import ValidationException
from multires.schemas.chain import ChainConfig

SHARED_OPTIONS = [
    click.option("--seed", type=int, default=None, help="Master seed (default from settings)."),
    click.option(
        "--config",
        "config_file",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="Flat key=value settings file.",
    ),
]

CHAIN_OPTIONS = [
    click.option("--workers", type=click.IntRange(min=1), default=None, help="Worker threads."),
    click.option(
        "--mode",
        type=click.Choice(["baseline", "ppmx"]),
        default=None,
        help="Model for Y given X (baseline) or joint with predictors (ppmx).",
    ),
    click.option("--burn", "n_burn", type=click.IntRange(min=0), default=None, help="Burn-in sweeps."),
    click.option("--keep", "n_keep", type=click.IntRange(min=1), default=None, help="Retained draws."),
    click.option("--thin", type=click.IntRange(min=1), default=None, help="Sweeps per retained draw."),
    click.option("--c-star", "c_star", type=click.IntRange(min=1), default=None, help="Auxiliary locations."),
    click.option(
        "--period-mean/--period-sum",
        "period_mean",
        default=None,
        help="Average county-years within a period instead of summing.",
    ),
    click.option("--no-intercept", is_flag=True, default=False, help="Do not prepend an intercept row."),
]


def _apply(options) -> Callable:
    def decorator(fn: Callable) -> Callable:
        for option in reversed(options):
            fn = option(fn)
        return fn

    return decorator


shared_options = _apply(SHARED_OPTIONS)
chain_options = _apply(CHAIN_OPTIONS)


def resolve_settings(config_file: str = None, **flags: Any) -> Settings:
    """Settings from file/env with command-line flags on top."""
    return load_settings(config_file).with_overrides(flags)


def chain_config(settings: Settings) -> ChainConfig:
    try:
        return ChainConfig.from_settings(settings)
    except ValidationError as exc:
        error = exc.errors()[0]
        field = ".".join(str(part) for part in error["loc"])
        raise ValidationException(f"invalid chain setting {field}: {error['msg']}", field=field)


def chain_flags(params: Dict[str, Any]) -> Dict[str, Any]:
    keys = ("seed", "workers", "mode", "n_burn", "n_keep", "thin", "c_star", "period_mean")
    return {key: params.get(key) for key in keys}

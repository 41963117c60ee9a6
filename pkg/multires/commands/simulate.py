import logging
from pathlib import Path
from typing import Optional, Tuple

import click
from pydantic import ValidationError

from multires.commands.options import resolve_settings, shared_options
from multires.core.exceptions import ValidationException
from multires.schemas.synth import SizeTiers, SynthConfig
from multires.services.chain_store import read_chain
from multires.services.linkage import load_dataset
from multires.services.reports import chain_manifest
from multires.services.synth import simulate

logger = logging.getLogger(__name__)


@click.command("simulate")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Bundle directory.")
@click.option("--counties", "n_counties", type=click.IntRange(min=2), default=30, show_default=True)
@click.option("--years", "T", type=click.IntRange(min=2), default=5, show_default=True)
@click.option("--predictors", "P", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--first-year", type=int, default=2008, show_default=True)
@click.option("--super-blocks", "n_super_blocks", type=click.IntRange(min=0), default=5, show_default=True)
@click.option("--clusters", "n_clusters", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--kappa1-spread", type=float, default=1.0, show_default=True)
@click.option("--truth-kappa", type=(float, float, float), default=(1.0, 1.0, 1.0), show_default=True)
@click.option("--truth-lambda", type=float, default=1.0, show_default=True)
@click.option("--draw-truth", is_flag=True, help="Draw kappa and Lambda_y from the base measure.")
@click.option("--noise-scale", type=click.FloatRange(min=0.0), default=1.0, show_default=True)
@click.option("--tiers", type=(float, float, float), default=(0.2, 0.4, 0.4), show_default=True,
              help="Fractions of 1-year, 3-year and 5-year counties.")
@click.option("--far-fraction", type=click.FloatRange(0.0, 1.0), default=0.0, show_default=True,
              help="Share of 5-year counties nested only in one large block.")
@click.option("--from-fit", "from_fit", type=click.Path(exists=True, file_okay=False), default=None,
              help="Chain directory whose posterior means become the truth.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Bundle the --from-fit chain was fitted on.")
@shared_options
def simulate_command(
    out: str,
    n_counties: int,
    T: int,
    P: int,
    first_year: int,
    n_super_blocks: int,
    n_clusters: int,
    kappa1_spread: float,
    truth_kappa: Tuple[float, float, float],
    truth_lambda: float,
    draw_truth: bool,
    noise_scale: float,
    tiers: Tuple[float, float, float],
    far_fraction: float,
    from_fit: Optional[str],
    data: Optional[str],
    seed: Optional[int],
    config_file: Optional[str],
):
    """Generate a synthetic dataset bundle with known truth."""
    settings = resolve_settings(config_file, seed=seed)
    try:
        config = SynthConfig(
            n_counties=n_counties,
            T=T,
            P=P,
            first_year=first_year,
            n_super_blocks=n_super_blocks,
            n_clusters=n_clusters,
            kappa1_spread=kappa1_spread,
            truth_kappa=None if draw_truth else list(truth_kappa),
            truth_lambda=None if draw_truth else truth_lambda,
            noise_scale=noise_scale,
            far_fraction=far_fraction,
            size_tiers=SizeTiers(one_year=tiers[0], three_year=tiers[1], five_year=tiers[2]),
            seed=settings.seed,
        )
    except ValidationError as exc:
        raise ValidationException(f"invalid simulation settings: {exc.errors()[0]['msg']}")
    if (from_fit is None) != (data is None):
        raise ValidationException("--from-fit and --data go together", field="data")
    truth_from, period_mean = None, False
    if from_fit is not None:
        manifest = chain_manifest(from_fit)
        dataset = load_dataset(data, intercept=bool(manifest.get("has_intercept", True)))
        truth_from = (dataset, read_chain(from_fit))
        period_mean = bool(manifest.get("config", {}).get("period_mean", False))
    paths = simulate(config, out, truth_from=truth_from, period_mean=period_mean)
    logger.info(f"✅ Bundle written to {Path(out).resolve()} ({paths.obs.name}, truth.csv)")

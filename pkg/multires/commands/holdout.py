import logging
from pathlib import Path
from typing import Optional

import click

from multires.commands.options import (
    chain_config,
    chain_flags,
    chain_options,
    resolve_settings,
    shared_options,
)
from multires.schemas.linkage import DatasetPaths
from multires.services.chain_store import read_chain
from multires.services.estimands import holdout_compare
from multires.services.fit import FitService
from multires.services.linkage import load_dataset, write_dataset
from multires.services.reports import write_holdout
from multires.services.synth import make_holdout

logger = logging.getLogger(__name__)


@click.command("holdout")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--county", required=True, help="County whose 1-year statistics are withheld.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@chain_options
@shared_options
def holdout_command(
    data: str,
    county: str,
    out: str,
    no_intercept: bool,
    config_file: Optional[str],
    **params,
):
    """Fit with and without one county's 1-year statistics and compare."""
    settings = resolve_settings(config_file, **chain_flags(params))
    config = chain_config(settings)
    out_dir = Path(out)
    paths = DatasetPaths.from_directory(Path(data))
    dataset = load_dataset(paths, intercept=not no_intercept)
    reduced = make_holdout(dataset, county)
    reduced_paths = write_dataset(reduced, out_dir / "holdout" / "data")

    logger.info("🚀 Holdout fit 1/2: full dataset")
    FitService(dataset, config, out_dir / "full", paths=paths, command="holdout").run()
    logger.info(f"🚀 Holdout fit 2/2: without the 1-year statistics of {county}")
    FitService(reduced, config, out_dir / "holdout", paths=reduced_paths, command="holdout").run()

    report = holdout_compare(
        dataset,
        county,
        read_chain(out_dir / "full"),
        read_chain(out_dir / "holdout"),
        interval=settings.interval,
    )
    path = write_holdout(report, out_dir)
    logger.info(f"✅ Holdout table written to {path}; max relative gap {report.max_relative_gap:.3%}")

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
from multires.services.fit import FitService
from multires.services.linkage import load_dataset

logger = logging.getLogger(__name__)


@click.command("fit")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False), help="Dataset bundle.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Chain output directory.")
@click.option(
    "--resume",
    type=click.Path(exists=True),
    default=None,
    help="Checkpoint file (or chain directory) to continue from.",
)
@click.option("--max-sweeps", type=click.IntRange(min=1), default=None, help="Stop after this many sweeps.")
@chain_options
@shared_options
def fit_command(
    data: str,
    out: str,
    resume: Optional[str],
    max_sweeps: Optional[int],
    no_intercept: bool,
    config_file: Optional[str],
    **params,
):
    """Run the sampler on a dataset bundle."""
    settings = resolve_settings(config_file, **chain_flags(params))
    config = chain_config(settings)
    paths = DatasetPaths.from_directory(Path(data))
    dataset = load_dataset(paths, intercept=not no_intercept)
    FitService(dataset, config, out, paths=paths).run(resume=resume, max_sweeps=max_sweeps)

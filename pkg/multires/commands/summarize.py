import logging
from typing import Optional

import click

from multires.commands.options import resolve_settings, shared_options
from multires.services.reports import SummaryService, read_grouping

logger = logging.getLogger(__name__)


@click.command("summarize")
@click.option("--chain", "chain_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option(
    "--data",
    required=True,
    type=click.Path(exists=True, file_okay=False),
    help="Dataset bundle the chain was fitted on.",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False),
    default=None,
    help="Output directory (default: the chain directory).",
)
@click.option("--interval", type=click.Choice(["equal-tail", "hpd"]), default=None)
@click.option("--county", default=None, help="Restrict summaries and pseudo-statistics to one county.")
@click.option("--pseudo/--no-pseudo", default=True, show_default=True)
@click.option(
    "--rollup",
    "rollup_file",
    type=click.Path(dir_okay=False),
    default=None,
    help="CSV with county_id, group_id.",
)
@click.option(
    "--truth",
    "truth_dir",
    type=click.Path(exists=True, file_okay=False),
    default=None,
    help="Directory with truth.csv and truth_labels.csv of a simulated bundle.",
)
@shared_options
def summarize_command(
    chain_dir: str,
    data: str,
    out: Optional[str],
    interval: Optional[str],
    county: Optional[str],
    pseudo: bool,
    rollup_file: Optional[str],
    truth_dir: Optional[str],
    seed: Optional[int],
    config_file: Optional[str],
):
    """Summaries, pseudo-statistics, roll-ups and fit statistics of a chain."""
    settings = resolve_settings(config_file, seed=seed, interval=interval)
    grouping = read_grouping(rollup_file) if rollup_file else None
    SummaryService.load(chain_dir, data).summarize(
        out or chain_dir,
        interval=settings.interval,
        county=county,
        pseudo=pseudo,
        grouping=grouping,
        min_draws=settings.min_draws,
        clip_percentile=settings.cpo_clip_percentile,
        seed=settings.seed,
        truth_dir=truth_dir,
    )

import logging
import sys

import click

from multires import __version__
from multires.commands.fit import fit_command
from multires.commands.holdout import holdout_command
from multires.commands.simulate import simulate_command
from multires.commands.summarize import summarize_command
from multires.core.config import settings
from multires.core.exceptions import (
    MultiresException,
    general_exception_handler,
    multires_exception_handler,
)

logger = logging.getLogger(__name__)


def configure_logging(level: str = None):
    logging.basicConfig(
        level=getattr(logging, (level or settings.log_level).upper()),
        format=settings.log_format,
        stream=sys.stderr,
        force=True,
    )


class MultiresGroup(click.Group):
    """Routes package exceptions to their handlers and exit codes."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except MultiresException as exc:
            ctx.exit(multires_exception_handler(exc))
        except Exception as exc:
            ctx.exit(general_exception_handler(exc))


@click.group(cls=MultiresGroup)
@click.version_option(__version__, prog_name="multires")
@click.option("--log-level", default=None, help="Override the configured log level.")
def cli(log_level: str):
    """Multiresolution small-area estimation."""
    configure_logging(log_level)


cli.add_command(simulate_command)
cli.add_command(fit_command)
cli.add_command(summarize_command)
cli.add_command(holdout_command)


if __name__ == "__main__":
    cli()

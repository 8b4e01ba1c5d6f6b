import logging
from typing import Optional

import click

from norms_align import __version__
from norms_align.client import Mode
from norms_align.config import DEFAULT_CONFIG, RunConfig
from norms_align.errors import NormsAlignError
from norms_align.pipeline import cmd_ingest, cmd_report, cmd_run, cmd_score


def head(stage: str) -> str:
    return click.style(f"[{stage}]", fg="bright_cyan", bold=True)


def _load(ctx: click.Context) -> RunConfig:
    return RunConfig.from_file(ctx.obj["config"], mode=ctx.obj["mode"])


def _fail(e: Exception):
    click.echo(f"{click.style('Error:', fg='bright_red', bold=True)} {e}", err=True)
    raise click.Abort()


@click.group()
@click.version_option(__version__, prog_name="norms-align")
@click.option("--config", default=DEFAULT_CONFIG, show_default=True, help="Path to the configuration file")
@click.option("--mode", type=click.Choice([m.value for m in Mode]), default=None,
              help="Override the mode of the configuration file")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging")
@click.pass_context
def main(ctx: click.Context, config: str, mode: Optional[str], verbose: bool):
    """norms-align: measure how well LLM word ratings align with human norms."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["config"] = config
    ctx.obj["mode"] = mode


@main.command()
@click.pass_context
def ingest(ctx: click.Context):
    """Parse the norm tables into canonical dataset files."""
    try:
        reports = cmd_ingest(_load(ctx))
    except (NormsAlignError, OSError, ValueError) as e:
        _fail(e)
    for r in reports:
        click.echo(f"{head('ingest')} {r.dataset}: {r.rows_accepted}/{r.rows_read} rows accepted, "
                   f"{len(r.violations)} rejected")


@main.command()
@click.pass_context
def run(ctx: click.Context):
    """Query every model for every sampled word."""
    try:
        summaries = cmd_run(_load(ctx))
    except (NormsAlignError, OSError, ValueError) as e:
        _fail(e)
    for s in summaries:
        coverage = "n/a" if s.mean_coverage is None else f"{s.mean_coverage:.3f}"
        line = (f"{head('run')} {s.model}: {s.prompts} prompts, {s.issued} issued, {s.cached} from cache, "
                f"{s.failed} failed, {s.non_compliant} non-compliant, mean coverage {coverage}")
        click.echo(line)
        for name, count in sorted(s.errors.items()):
            click.echo(f"      {click.style(name, fg='bright_yellow')}: {count}")


@main.command()
@click.pass_context
def score(ctx: click.Context):
    """Compute the alignment coefficients from the estimate files."""
    try:
        results = cmd_score(_load(ctx))
    except (NormsAlignError, OSError, ValueError) as e:
        _fail(e)
    flagged = sum(1 for r in results if r.divergence_flag)
    undefined = sum(1 for r in results if r.pearson_raw is None)
    click.echo(f"{head('score')} {len(results)} result(s), {flagged} flagged, {undefined} undefined")


@main.command()
@click.pass_context
def report(ctx: click.Context):
    """Render radar charts, the results table and the divergence report."""
    try:
        written = cmd_report(_load(ctx))
    except (NormsAlignError, OSError, ValueError) as e:
        _fail(e)
    for path in written:
        click.echo(f"{head('report')} {path.as_posix()}")


if __name__ == '__main__':
    main()

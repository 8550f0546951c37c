"""
Command line front end: generate data, train stages, analyze checkpoints, compare runs, sweep perceivers.
"""

import logging
import os
import sys
from contextlib import contextmanager

import click
import runez

from prealign import __version__, abort, ANALYSES, DEFAULTS, inform, PrealignError, RunConfig, STAGES, VARIANTS
from prealign.recipe import Analysis, compare_runs, Recipe, sweep_perceivers


LOG = logging.getLogger(__name__)


def setup_run_log(folder):
    """Setup <folder>/run.log log file handler, the only place where timestamps are recorded"""
    if runez.DRYRUN:
        if not runez.log.console_handler or runez.log.spec.console_level > logging.INFO:
            runez.log.setup(console_level=logging.INFO)

        return

    if not runez.log.file_handler:
        log_path = os.path.join(folder, "run.log")
        runez.log.trace("Logging to %s", log_path)
        runez.ensure_folder(folder, logger=False)
        runez.log.setup(
            file_format="%(asctime)s %(timezone)s [%(process)s] %(context)s%(levelname)s - %(message)s",
            file_level=logging.DEBUG,
            file_location=log_path,
            greetings=":: {argv}",
            rotate="size:500k",
            rotate_count=1,
        )


@contextmanager
def exit_codes():
    """Report PrealignError-s as a one-line message, with their documented exit code"""
    try:
        yield

    except PrealignError as e:
        abort(runez.red(e), code=e.exit_code)


@runez.click.group()
@click.pass_context
@runez.click.version(message="%(version)s", version=__version__)
@runez.click.debug("-v")
@runez.click.dryrun("-n")
@runez.click.color()
def main(ctx, debug):
    """Testbed for pre-aligning visual features with a small perceiver VLM"""
    runez.system.AbortException = SystemExit
    runez.log.setup(
        debug=debug or os.environ.get("PREALIGN_TRACE"),
        console_format="%(levelname)s %(message)s" if debug else "%(message)s",
        console_level=logging.WARNING,
        console_stream=sys.stderr,
        locations=None,
        trace="PREALIGN_TRACE",
    )


@main.command(name="gen-data")
@click.argument("config", required=True)
def gen_data(config):
    """Generate the synthetic corpus"""
    with exit_codes():
        recipe = Recipe(RunConfig(config))
        if runez.DRYRUN:
            inform(f"Would generate {recipe.corpus_settings} into {runez.short(recipe.corpus_path)}")
            return

        setup_run_log(recipe.root.path)
        corpus = recipe.generate_corpus()
        for name, samples in corpus.splits.items():
            inform(f"{name}: {runez.plural(samples, 'sample')}")

        inform(f"Wrote {runez.short(recipe.corpus_path)} (hash {corpus.hash})")


@main.command()
@click.option("--stage", "-s", required=True, type=click.Choice(STAGES), help="Stage to run")
@click.option("--variant", type=click.Choice(VARIANTS), help="Pipeline variant (overrides config)")
@click.option("--seed", type=int, help="Run seed (overrides config)")
@click.argument("config", required=True)
def train(stage, variant, seed, config):
    """Run one training stage"""
    with exit_codes():
        recipe = Recipe(RunConfig(config, variant=variant, seed=seed))
        folder = recipe.shared.path if stage in ("stage0", "perceiver") else recipe.run.path
        if runez.DRYRUN:
            inform(f"Would run {stage} of {recipe}, writing into {runez.short(folder)}")
            return

        setup_run_log(folder)
        ckpt = recipe.run_stage(stage)
        inform(f"Done {stage} of {recipe}: checkpoint {ckpt.hash}")


@main.command()
@click.option("--against", "-a", metavar="PATH", help="Checkpoint to compare with")
@click.option("--what", "-w", multiple=True, type=click.Choice(ANALYSES), help="Analyses to run (default: enabled in config)")
@click.option("--config", "-c", metavar="PATH", help="Run config (locates the corpus for activation analyses)")
@click.option("--throughput", is_flag=True, help="Also time greedy generation (reported on console only)")
@click.argument("checkpoint", required=True)
def analyze(against, what, config, throughput, checkpoint):
    """Analyze a checkpoint: modality gap, layer similarity, adaptation, FLOPs"""
    with exit_codes():
        cfg = RunConfig(config) if config else None
        analysis = Analysis(checkpoint, against_path=against, cfg=cfg)
        settings = cfg.resolved["analysis"] if cfg else DEFAULTS["analysis"]
        what = list(what) or [name for name in ANALYSES if settings[name]]
        setup_run_log(os.path.dirname(analysis.folder.path))
        analysis.run(what)
        if throughput:
            analysis.throughput()

        inform(f"Reports are in {runez.short(analysis.folder.path)}")


@main.command()
@click.option("--baseline", "-b", default="baseline_vit", show_default=True, help="Variant to compute deltas against")
@click.option("--output", "-o", metavar="PATH", help="Write comparison as csv to this file")
@runez.click.border("-B", default="github")
@click.option("--format", type=click.Choice(["csv", "json", "table"]), default="table", show_default=True, help="How to show comparison")
@click.argument("run_dirs", nargs=-1, required=True)
def compare(baseline, output, border, format, run_dirs):
    """Compare stage-2 metrics of several runs"""
    if len(run_dirs) < 2:
        abort("Need at least 2 run folders to compare", code=1)

    with exit_codes():
        report = compare_runs(run_dirs, baseline=baseline, border=border)
        if output:
            runez.write(output, report.represented("csv"), logger=False)
            inform(f"Wrote {runez.short(output)}")

        print(report.represented(format))


@main.command()
@click.argument("config", required=True)
def sweep(config):
    """Correlate perceiver quality with final DPA quality, over several perceiver budgets"""
    with exit_codes():
        cfg = RunConfig(config)
        recipe = Recipe(cfg)
        if runez.DRYRUN:
            inform(f"Would sweep perceiver budgets {cfg.resolved['sweep']['budgets']} for {recipe}")
            return

        setup_run_log(recipe.root.full_path("sweep"))
        correlations = sweep_perceivers(cfg)
        for group, value in sorted(correlations.items()):
            inform(f"{group}: pearson {value:.4f}")


@main.command(name="config")
@click.option("--resolved", is_flag=True, help="Show resolved canonical json, and its hash")
@click.argument("config", required=True)
def show_config(resolved, config):
    """Show configuration"""
    with exit_codes():
        cfg = RunConfig(config)
        if resolved:
            print(runez.represented_json(cfg.resolved))
            print(f"hash: {cfg.hash}")
            return

        print(cfg.represented())

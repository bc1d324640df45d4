"""``adrm`` command line: train, eval, analyze, validate-config, list-presets, check."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import yaml

from . import runs
from .config import PRESETS, json_schema, load_config
from .errors import AdrmError


def _floats(text):
    return None if text is None else [float(v) for v in text.split(",") if v.strip()]


def _words(text):
    return None if text is None else [v.strip() for v in text.split(",") if v.strip()]


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose):
    """Continual learning with adversarially diversified rehearsal memory."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _fail(err):
    click.echo(f"error: {err}", err=True)
    sys.exit(2 if isinstance(err, AdrmError) else 1)


@main.command()
@click.argument("config")
@click.option("--output-dir", default=None,
              help=f"Output root (overrides config.output_dir and ${runs.OUTPUT_ROOT_ENV}).")
def train(config, output_dir):
    """Train a run from a CONFIG file or preset name."""
    try:
        run_dir = runs.cmd_train(config, output_dir)
    except Exception as err:  # noqa: BLE001 - reported as exit status
        _fail(err)
    click.echo(str(run_dir))


@main.command("eval")
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--kinds", help="Comma-separated corruption kinds.")
@click.option("--severities", help="Comma-separated severities, e.g. 0,1,5.")
@click.option("--attacks", help="Comma-separated attack kinds (fgsm,pgd_linf,pgd_l2).")
@click.option("--epsilons", help="Comma-separated epsilons in 1/255 units.")
@click.option("--no-corruption", is_flag=True)
@click.option("--no-attacks", is_flag=True)
@click.option("--max-examples", type=int, default=None)
def eval_(run_dir, kinds, severities, attacks, epsilons, no_corruption, no_attacks, max_examples):
    """Corruption and adversarial robustness sweeps for a finished run."""
    sev = None if severities is None else [int(s) for s in _floats(severities)]
    try:
        out = runs.cmd_eval(run_dir, _words(kinds), sev, _words(attacks), _floats(epsilons),
                            not no_corruption, not no_attacks, max_examples)
    except Exception as err:  # noqa: BLE001
        _fail(err)
    for key, rows in out.items():
        click.echo(f"{key}: {len(rows)} rows")


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--subset-seed", type=int, default=0)
@click.option("--subset-size", type=int, default=None)
def analyze(run_dirs, out_dir, subset_seed, subset_size):
    """Feature export and linear-CKA similarity matrix across runs."""
    try:
        sim = runs.cmd_analyze(run_dirs, out_dir, subset_seed, subset_size)
    except Exception as err:  # noqa: BLE001
        _fail(err)
    click.echo(f"{len(sim.model_ids)}x{len(sim.model_ids)} CKA matrix -> {out_dir}/cka_matrix.csv")


@main.command("validate-config")
@click.argument("config")
@click.option("--show", is_flag=True, help="Print the normalized config.")
@click.option("--schema", is_flag=True, help="Print the JSON schema instead.")
def validate_config(config, show, schema):
    """Check a config file (or preset) against the schema."""
    if schema:
        click.echo(json.dumps(json_schema(), indent=2))
        return
    try:
        cfg, _ = load_config(config)
    except AdrmError as err:
        _fail(err)
    if show:
        click.echo(yaml.safe_dump(cfg.normalized(), sort_keys=False))
    else:
        click.echo(f"ok {cfg.name} {cfg.digest()[:12]}")


@main.command("list-presets")
def list_presets():
    """Show the named config presets."""
    for name, p in PRESETS.items():
        t = p["train"]
        ratio = t.get("diversification", {}).get("ratio")
        extra = f" r={ratio}" if ratio is not None else ""
        click.echo(f"{name:24s} {p['model']['architecture']:10s} {t['mode']}{extra}")


@main.command()
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
def check(paths):
    """Verify run directories (checksums + CSV schemas) or individual CSV files."""
    problems = []
    for p in paths:
        try:
            problems += runs.check_run(p) if Path(p).is_dir() else runs.check_csv(p)
        except AdrmError as err:
            problems.append(str(err))
    for line in problems:
        click.echo(line, err=True)
    if problems:
        sys.exit(1)
    click.echo("ok")


if __name__ == "__main__":
    main()

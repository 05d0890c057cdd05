"""Command-line interface.

Subcommands: train, distill, sample, eval, sweep, ablate, fast-schedule,
weights. Configuration comes from an optional JSON file merged over embedded
defaults, with single keys overridable as ``--set section.key=value``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.

Tabular results are CSV (byte-stable across reruns with the same seed);
companion figures are rendered next to each CSV unless ``--no-plot``.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import reports
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    dataset_from_config,
    distill_config_from,
    eval_settings_from,
    load_config,
    train_config_from,
)
from .data_metrics import ToyDataset
from .diffusion import weight_curve_rows
from .distill import progressive_distill
from .experiments import (
    evaluate_sampler,
    ladder_manifest,
    load_ladder_dir,
    run_ablation,
    run_fast_schedule,
    run_sweep,
)
from .samplers import SamplerSpec, sample_batch
from .schedule import make_grid
from .training import DivergenceError, train_original

EXIT_CONFIG_ERROR = 2
EXIT_DIVERGENCE = 3


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _write_csv(path: str | Path, fieldnames: list[str], rows: list[dict], append: bool = False) -> None:
    path = Path(path)
    exists = append and path.exists() and path.stat().st_size > 0
    mode = "a" if exists else "w"
    with open(path, mode, newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if not exists:
            writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row.get(name)) for name in fieldnames])


def _handle_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        except DivergenceError as exc:
            click.echo(f"numerical divergence: {exc}", err=True)
            sys.exit(EXIT_DIVERGENCE)

    return wrapper


def _config_options(f):
    f = click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="JSON config file (merged over defaults).",
    )(f)
    f = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="SECTION.KEY=VALUE",
        help="Override one config key.",
    )(f)
    return f


def _plot_option(f):
    return click.option("--plot/--no-plot", default=True, help="Render a figure next to the CSV.")(f)


@click.group()
@click.version_option(package_name="stepdistill")
def main():
    """Toy-scale diffusion models with progressive step-count distillation."""


@main.command()
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output CSV.")
@click.option("--lambda-min", type=float, default=-15.0, show_default=True)
@click.option("--lambda-max", type=float, default=15.0, show_default=True)
@click.option("--points", type=int, default=601, show_default=True)
@_plot_option
@_handle_errors
def weights(out, lambda_min, lambda_max, points, plot):
    """Export the loss-weight curves over log-SNR (with and without the
    time-sampling density of the cosine schedule)."""
    if points < 2 or lambda_max <= lambda_min:
        raise ConfigError("need points >= 2 and lambda-max > lambda-min")
    rows = weight_curve_rows(np.linspace(lambda_min, lambda_max, points))
    fields = [
        "log_snr",
        "snr",
        "truncated_snr",
        "snr_plus_one",
        "density",
        "snr_incl_schedule",
        "truncated_snr_incl_schedule",
        "snr_plus_one_incl_schedule",
    ]
    _write_csv(out, fields, rows)
    click.echo(f"wrote {out}")
    if plot:
        click.echo(f"wrote {reports.weight_curves_figure(rows, Path(out).with_suffix('.png'))}")


@main.command()
@_config_options
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output checkpoint.")
@_plot_option
@_handle_errors
def train(config_path, overrides, out, plot):
    """Train a diffusion model from scratch on a toy dataset."""
    config = load_config(config_path, list(overrides))
    ckpt, curve = train_original(train_config_from(config))
    ckpt.metadata["config"] = config
    save_checkpoint(out, ckpt)
    rows = [
        {"update": p.update, "raw_loss": p.raw_loss, "ema_eval_metric": p.ema_eval} for p in curve
    ]
    loss_csv = Path(str(out) + ".loss.csv")
    _write_csv(loss_csv, ["update", "raw_loss", "ema_eval_metric"], rows)
    click.echo(f"wrote {out} and {loss_csv}")
    if plot and rows:
        click.echo(f"wrote {reports.loss_curve_figure(rows, Path(str(out) + '.loss.png'))}")


def _dataset_for_checkpoint(config: dict, ckpt) -> ToyDataset:
    dataset = dataset_from_config(config)
    if dataset.dim != ckpt.model.config.input_dim:
        raise ConfigError(
            f"dataset {dataset.kind!r} has dimension {dataset.dim} but the checkpoint "
            f"expects {ckpt.model.config.input_dim}"
        )
    return dataset


@main.command()
@_config_options
@click.option("--teacher", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@_plot_option
@_handle_errors
def distill(config_path, overrides, teacher, out_dir, plot):
    """Progressively distill a trained checkpoint down to few sampling steps."""
    config = load_config(config_path, list(overrides))
    base = load_checkpoint(teacher)
    dataset = _dataset_for_checkpoint(config, base)
    cfg = distill_config_from(config)
    settings = eval_settings_from(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    files: list[str] = []

    def on_rung(rung):
        name = f"rung_{rung.n_steps:04d}.ckpt"
        save_checkpoint(out / name, rung.checkpoint)
        files.append(name)
        click.echo(
            f"rung N={rung.n_steps}: energy_distance={rung.energy_distance:.6g}"
            + (f" agreement={rung.agreement:.6g}" if rung.agreement is not None else "")
        )

    ladder = progressive_distill(base, dataset, cfg, eval_settings=settings, on_rung=on_rung)
    manifest = ladder_manifest(ladder, files, teacher, cfg)
    (out / "ladder.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    rows = [
        {
            "n_steps": r.n_steps,
            "energy_distance": r.energy_distance,
            "w1": r.w1,
            "agreement": r.agreement,
        }
        for r in ladder.rungs
    ]
    _write_csv(out / "sweep.csv", ["n_steps", "energy_distance", "agreement", "w1"], rows)
    click.echo(f"wrote {out / 'ladder.json'} and {out / 'sweep.csv'}")
    if plot:
        click.echo(f"wrote {reports.ladder_figure(manifest['rungs'], out / 'sweep.png')}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--sampler", default="ddim", show_default=True, help="Kind, e.g. ddim, rk4, ancestral:0.3.")
@click.option("--steps", type=int, required=True)
@click.option("--count", type=int, required=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_plot_option
@_handle_errors
def sample(checkpoint, sampler, steps, count, seed, out, plot):
    """Generate samples from a checkpoint and write them as CSV."""
    ckpt = load_checkpoint(checkpoint)
    try:
        spec = SamplerSpec.parse(sampler)
        grid = make_grid(steps)
        if not 0 <= seed < 2**64 or count < 1:
            raise ValueError("seed must be a 64-bit unsigned integer and count >= 1")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dim = ckpt.model.config.input_dim
    samples = sample_batch(
        ckpt.model.denoiser(use_ema=True), spec, grid, seed=seed, count=count, dim=dim
    )
    fields = ["sample_index"] + [f"dim_{i}" for i in range(dim)]
    rows = [
        {"sample_index": i, **{f"dim_{j}": samples[i, j] for j in range(dim)}}
        for i in range(count)
    ]
    _write_csv(out, fields, rows)
    click.echo(f"wrote {out}")
    if plot:
        title = f"{spec.label()}, N={steps}"
        click.echo(f"wrote {reports.samples_figure(samples, Path(out).with_suffix('.png'), title)}")


@main.command("eval")
@_config_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--sampler", default="ddim", show_default=True)
@click.option("--steps", type=int, required=True)
@click.option("--dataset", "dataset_tag", required=True, help="Reference dataset tag.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="CSV to append to.")
@_handle_errors
def eval_cmd(config_path, overrides, checkpoint, sampler, steps, dataset_tag, out):
    """Evaluate a checkpoint's samples against a dataset; appends one metric row."""
    config = load_config(config_path, list(overrides) + [f"dataset.kind={dataset_tag}"])
    ckpt = load_checkpoint(checkpoint)
    dataset = _dataset_for_checkpoint(config, ckpt)
    try:
        spec = SamplerSpec.parse(sampler)
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    res = evaluate_sampler(
        ckpt,
        spec,
        steps,
        dataset,
        count=int(config["eval"]["count"]),
        seed=int(config["eval"]["seed"]),
    )
    row = {
        "sampler": res.sampler,
        "n_steps": res.n_steps,
        "energy_distance": res.energy_distance,
        "w1": res.w1,
        "agreement": None,
    }
    _write_csv(out, ["sampler", "n_steps", "energy_distance", "w1", "agreement"], [row], append=True)
    click.echo(
        f"{res.sampler} N={res.n_steps}: energy_distance={res.energy_distance:.6g}"
        + (f" w1={res.w1:.6g}" if res.w1 is not None else "")
    )


@main.command()
@_config_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Undistilled base checkpoint.")
@click.option("--ladder-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_plot_option
@_handle_errors
def sweep(config_path, overrides, checkpoint, ladder_dir, out, plot):
    """Step-count sweep: distilled vs undistilled, DDIM vs best stochastic."""
    config = load_config(config_path, list(overrides))
    base = load_checkpoint(checkpoint)
    try:
        _manifest, rungs = load_ladder_dir(ladder_dir)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    dataset = _dataset_for_checkpoint(config, base)
    rows = run_sweep(base, rungs, dataset, config)
    _write_csv(out, ["curve", "n_steps", "coef", "energy_distance", "w1"], rows)
    click.echo(f"wrote {out} ({len(rows)} rows)")
    if plot:
        click.echo(f"wrote {reports.sweep_figure(rows, Path(out).with_suffix('.png'))}")


@main.command()
@_config_options
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_plot_option
@_handle_errors
def ablate(config_path, overrides, out, plot):
    """Train the parameterization x loss-weighting grid and evaluate each cell.

    Divergent cells are reported with status "na" instead of failing the run."""
    config = load_config(config_path, list(overrides))
    rows = run_ablation(config)
    fields = ["parameterization", "weighting", "status", "stochastic", "ddim",
              "w1_stochastic", "w1_ddim"]
    _write_csv(out, fields, rows)
    n_na = sum(1 for r in rows if r["status"] != "ok")
    click.echo(f"wrote {out} ({len(rows)} cells, {n_na} n/a)")
    if plot:
        click.echo(f"wrote {reports.ablation_figure(rows, Path(out).with_suffix('.png'))}")


@main.command("fast-schedule")
@_config_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_plot_option
@_handle_errors
def fast_schedule(config_path, overrides, checkpoint, out, plot):
    """Compare distillation ladders at reduced update budgets and the
    divide-by-4 schedule."""
    config = load_config(config_path, list(overrides))
    base = load_checkpoint(checkpoint)
    dataset = _dataset_for_checkpoint(config, base)
    rows, metadata, warnings = run_fast_schedule(base, checkpoint, dataset, config)
    fields = ["schedule", "divisor", "budget_scale", "n_steps", "updates",
              "energy_distance", "agreement"]
    _write_csv(out, fields, rows)
    meta_path = Path(str(out) + ".json")
    meta_path.write_text(json.dumps(metadata, sort_keys=True, indent=2) + "\n")
    click.echo(f"wrote {out} and {meta_path}")
    for message in warnings:
        click.echo(f"warning: {message}", err=True)
    if plot:
        click.echo(f"wrote {reports.fast_schedule_figure(rows, Path(out).with_suffix('.png'))}")


if __name__ == "__main__":
    main()

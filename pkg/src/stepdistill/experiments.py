"""Experiment pipelines behind the CLI: evaluation, ablation grid, step-count
sweep, and fast-schedule comparison.

All pipelines are pure functions from (checkpoints, config) to row dicts;
CSV/figure writing stays in the CLI layer. Randomness is derived from the
config's evaluation seed, so identical inputs give identical rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from .checkpoint import Checkpoint, checkpoint_hash, load_checkpoint
from .config import (
    ConfigError,
    dataset_from_config,
    distill_config_from,
    eval_settings_from,
    train_config_from,
)
from .data_metrics import ToyDataset, energy_distance, generate, wasserstein1
from .diffusion import LossWeighting, Parameterization
from .distill import DistillConfig, DistillLadder, progressive_distill
from .samplers import SamplerKind, SamplerSpec, sample_batch
from .schedule import make_grid
from .training import DivergenceError, train_original

__all__ = [
    "EvalResult",
    "evaluate_sampler",
    "best_stochastic",
    "coefficient_grid",
    "run_ablation",
    "run_sweep",
    "run_fast_schedule",
    "ABLATION_PARAMETERIZATIONS",
    "ABLATION_WEIGHTINGS",
]

# Row order of the ablation grid (fixed for deterministic output).
ABLATION_PARAMETERIZATIONS = (
    Parameterization.XEPS_COMBINED,
    Parameterization.X,
    Parameterization.EPS,
    Parameterization.V,
)
ABLATION_WEIGHTINGS = (
    LossWeighting.SNR,
    LossWeighting.TRUNCATED_SNR,
    LossWeighting.SNR_PLUS_ONE,
)


@dataclass(frozen=True)
class EvalResult:
    sampler: str
    n_steps: int
    energy_distance: float
    w1: float | None


def evaluate_sampler(
    ckpt: Checkpoint,
    spec: SamplerSpec,
    n_steps: int,
    dataset: ToyDataset,
    *,
    count: int,
    seed: int,
) -> EvalResult:
    """Energy distance (and W1 for 1-D data) of the checkpoint's samples
    against a fresh reference set from the dataset."""
    samples = sample_batch(
        ckpt.model.denoiser(use_ema=True),
        spec,
        make_grid(n_steps),
        seed=seed,
        count=count,
        dim=dataset.dim,
    )
    reference = generate(dataset, count, seed)
    ed = energy_distance(samples, reference)
    w1 = wasserstein1(samples, reference) if dataset.dim == 1 else None
    return EvalResult(sampler=spec.label(), n_steps=n_steps, energy_distance=ed, w1=w1)


def coefficient_grid(size: int = 11) -> list[float]:
    """Interpolation coefficients whose implied noise variances are spaced
    log-uniformly between the posterior and transition variance bounds."""
    return [i / (size - 1) for i in range(size)]


def best_stochastic(
    ckpt: Checkpoint,
    n_steps: int,
    dataset: ToyDataset,
    *,
    count: int,
    seed: int,
    coefs: list[float],
) -> tuple[float, EvalResult]:
    """Grid-search the interpolation coefficient; returns (best coef, result).
    Ties break toward the smaller coefficient."""
    best: tuple[float, EvalResult] | None = None
    for coef in coefs:
        res = evaluate_sampler(
            ckpt,
            SamplerSpec(kind=SamplerKind.STOCH_INTERP, noise_mix=coef),
            n_steps,
            dataset,
            count=count,
            seed=seed,
        )
        if best is None or res.energy_distance < best[1].energy_distance:
            best = (coef, res)
    assert best is not None
    return best


def run_ablation(config: dict) -> list[dict[str, Any]]:
    """Train the full parameterization x weighting grid and evaluate each cell
    with a stochastic and a DDIM sampler. Divergent cells are recorded as
    status "na" rather than aborting the grid."""
    dataset = dataset_from_config(config)
    eval_cfg = config["eval"]
    base_train = train_config_from(config)
    base_train = replace(base_train, total_updates=int(eval_cfg["ablate_updates"]))
    rows: list[dict[str, Any]] = []
    for param in ABLATION_PARAMETERIZATIONS:
        for weighting in ABLATION_WEIGHTINGS:
            cell = replace(base_train, parameterization=param, weighting=weighting)
            row: dict[str, Any] = {
                "parameterization": param.value,
                "weighting": weighting.value,
                "status": "ok",
                "stochastic": None,
                "ddim": None,
                "w1_stochastic": None,
                "w1_ddim": None,
            }
            try:
                ckpt, _ = train_original(cell)
                stoch = evaluate_sampler(
                    ckpt,
                    SamplerSpec(kind=SamplerKind.ANCESTRAL, noise_mix=float(eval_cfg["ablate_coef"])),
                    int(eval_cfg["steps"]),
                    dataset,
                    count=int(eval_cfg["count"]),
                    seed=int(eval_cfg["seed"]),
                )
                ddim = evaluate_sampler(
                    ckpt,
                    SamplerSpec(kind=SamplerKind.DDIM),
                    int(eval_cfg["steps"]),
                    dataset,
                    count=int(eval_cfg["count"]),
                    seed=int(eval_cfg["seed"]),
                )
                finite = np.isfinite(stoch.energy_distance) and np.isfinite(ddim.energy_distance)
                if not finite:
                    row["status"] = "na"
                else:
                    row.update(
                        stochastic=stoch.energy_distance,
                        ddim=ddim.energy_distance,
                        w1_stochastic=stoch.w1,
                        w1_ddim=ddim.w1,
                    )
            except DivergenceError:
                row["status"] = "na"
            rows.append(row)
    return rows


def load_ladder_dir(ladder_dir: str | Path) -> tuple[dict, list[tuple[int, Checkpoint]]]:
    """Read ladder.json and the rung checkpoints from a distillation output dir."""
    ladder_dir = Path(ladder_dir)
    manifest_path = ladder_dir / "ladder.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no ladder.json in {ladder_dir}")
    manifest = json.loads(manifest_path.read_text())
    rungs = []
    missing = []
    for entry in manifest["rungs"]:
        path = ladder_dir / entry["file"]
        if not path.exists():
            missing.append(entry["file"])
            continue
        rungs.append((int(entry["n_steps"]), load_checkpoint(path)))
    if missing:
        raise FileNotFoundError(f"missing rung checkpoints in {ladder_dir}: {missing}")
    return manifest, rungs


def run_sweep(
    base: Checkpoint,
    rungs: list[tuple[int, Checkpoint]],
    dataset: ToyDataset,
    config: dict,
) -> list[dict[str, Any]]:
    """Step-count sweep rows for four curves: distilled/undistilled DDIM and
    distilled/undistilled stochastic (per-step-count best coefficient)."""
    eval_cfg = config["eval"]
    count, seed = int(eval_cfg["count"]), int(eval_cfg["seed"])
    coefs = coefficient_grid(int(eval_cfg["coef_grid_size"]))
    rows: list[dict[str, Any]] = []

    def add(curve: str, n_steps: int, res: EvalResult, coef: float | None = None):
        rows.append(
            {
                "curve": curve,
                "n_steps": n_steps,
                "coef": coef,
                "energy_distance": res.energy_distance,
                "w1": res.w1,
            }
        )

    ddim = SamplerSpec(kind=SamplerKind.DDIM)
    for n_steps, ckpt in rungs:
        add("distilled_ddim", n_steps, evaluate_sampler(ckpt, ddim, n_steps, dataset, count=count, seed=seed))
    for n_steps, _ in rungs:
        add("undistilled_ddim", n_steps, evaluate_sampler(base, ddim, n_steps, dataset, count=count, seed=seed))
    for n_steps, _ in rungs:
        coef, res = best_stochastic(base, n_steps, dataset, count=count, seed=seed, coefs=coefs)
        add("undistilled_stochastic", n_steps, res, coef)
    for n_steps, ckpt in rungs:
        coef, res = best_stochastic(ckpt, n_steps, dataset, count=count, seed=seed, coefs=coefs)
        add("distilled_stochastic", n_steps, res, coef)
    return rows


def run_fast_schedule(
    base: Checkpoint,
    base_path: str | Path,
    dataset: ToyDataset,
    config: dict,
) -> tuple[list[dict[str, Any]], dict[str, Any], list[str]]:
    """Ladders at scaled update budgets for divisor 2 plus a divide-by-4
    ladder at full budget. Returns (rows, metadata, warnings)."""
    base_cfg = distill_config_from(config)
    settings = eval_settings_from(config)
    scales = [float(s) for s in config["eval"]["fast_budget_scales"]]
    schedules: list[tuple[str, int, float]] = [
        (f"div2_x{scale:g}", 2, scale) for scale in scales
    ] + [("div4_x1", 4, 1.0)]

    base_hash = checkpoint_hash(base_path)
    rows: list[dict[str, Any]] = []
    finals: dict[str, float] = {}
    metadata: dict[str, Any] = {"schedules": {}}
    for name, divisor, scale in schedules:
        try:
            cfg = replace(
                base_cfg,
                step_divisor=divisor,
                updates_per_iteration=max(1, round(base_cfg.updates_per_iteration * scale)),
                updates_small_n=max(1, round(base_cfg.updates_small_n * scale)),
            )
        except ValueError as exc:
            # every schedule must reach end_steps exactly, including the /4 ladder
            raise ConfigError(f"schedule {name}: {exc}") from exc
        ladder = progressive_distill(base, dataset, cfg, eval_settings=settings)
        for rung in ladder.rungs:
            rows.append(
                {
                    "schedule": name,
                    "divisor": divisor,
                    "budget_scale": scale,
                    "n_steps": rung.n_steps,
                    "updates": rung.updates,
                    "energy_distance": rung.energy_distance,
                    "agreement": rung.agreement,
                }
            )
        finals[name] = ladder.rungs[-1].energy_distance
        metadata["schedules"][name] = {
            "divisor": divisor,
            "budget_scale": scale,
            "base_checkpoint_hash": base_hash,
        }

    warnings: list[str] = []
    # Soft expectation at roughly matched compute: halving updates beats
    # skipping distillation iterations.
    if "div4_x1" in finals and "div2_x0.5" in finals:
        if finals["div4_x1"] < finals["div2_x0.5"]:
            warnings.append(
                "divide-by-4 ladder beat the matched-compute divide-by-2 ladder "
                f"({finals['div4_x1']:.4g} < {finals['div2_x0.5']:.4g}); "
                "expected the opposite direction"
            )
    return rows, metadata, warnings


def ladder_manifest(
    ladder: DistillLadder,
    files: list[str],
    base_path: str | Path,
    distill_cfg: DistillConfig,
) -> dict[str, Any]:
    """ladder.json content for a distillation output directory."""
    return {
        "base_checkpoint": Path(base_path).name,
        "base_checkpoint_hash": checkpoint_hash(base_path),
        "step_divisor": distill_cfg.step_divisor,
        "seed": distill_cfg.seed,
        "rungs": [
            {
                "n_steps": rung.n_steps,
                "file": files[i],
                "updates": rung.updates,
                "energy_distance": rung.energy_distance,
                "w1": rung.w1,
                "agreement": rung.agreement,
            }
            for i, rung in enumerate(ladder.rungs)
        ],
    }

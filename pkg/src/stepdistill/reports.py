"""Figure rendering for report CSVs.

Every report-producing CLI command can render a matplotlib figure next to
its CSV. Figures are a convenience view; the CSVs remain the canonical,
byte-stable output.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "weight_curves_figure",
    "loss_curve_figure",
    "samples_figure",
    "sweep_figure",
    "ladder_figure",
    "fast_schedule_figure",
    "ablation_figure",
]

_STEP_TICKS = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512]


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def weight_curves_figure(rows: list[dict[str, float]], path: str | Path) -> Path:
    lam = np.array([r["log_snr"] for r in rows])
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    styles = {"snr": "-", "truncated_snr": ":", "snr_plus_one": "--"}
    for key, style in styles.items():
        with np.errstate(divide="ignore"):
            left.plot(lam, np.log(np.array([r[key] for r in rows])), style, label=key)
        right.plot(lam, [r[f"{key}_incl_schedule"] for r in rows], style, label=key)
    left.set_xlabel("log SNR")
    left.set_ylabel("log weight (excluding schedule)")
    left.legend()
    right.set_xlabel("log SNR")
    right.set_ylabel("weight (including schedule)")
    right.legend()
    fig.tight_layout()
    return _save(fig, path)


def loss_curve_figure(rows: list[dict[str, Any]], path: str | Path) -> Path:
    updates = [r["update"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(updates, [r["raw_loss"] for r in rows], lw=0.5, alpha=0.6, label="raw loss")
    ema = [(r["update"], r["ema_eval_metric"]) for r in rows if r["ema_eval_metric"] is not None]
    if ema:
        ax.plot(*zip(*ema), lw=1.5, label="EMA probe loss")
    ax.set_yscale("log")
    ax.set_xlabel("update")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def samples_figure(samples: np.ndarray, path: str | Path, title: str = "") -> Path:
    samples = np.atleast_2d(samples)
    fig, ax = plt.subplots(figsize=(5, 5))
    if samples.shape[1] == 1:
        ax.hist(samples[:, 0], bins=80, density=True, alpha=0.8)
        ax.set_xlabel("x")
        ax.set_ylabel("density")
    else:
        ax.scatter(samples[:, 0], samples[:, 1], s=2, alpha=0.4)
        ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def _loglog_steps_axis(ax, max_steps: int):
    ax.set_xscale("log")
    ax.set_yscale("log")
    ticks = [t for t in _STEP_TICKS if t <= max_steps]
    ax.set_xticks(ticks)
    ax.set_xticklabels([str(t) for t in ticks])
    ax.invert_xaxis()
    ax.set_xlabel("sampling steps")
    ax.set_ylabel("energy distance")


def sweep_figure(rows: list[dict[str, Any]], path: str | Path) -> Path:
    curves: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        curves.setdefault(r["curve"], []).append((r["n_steps"], r["energy_distance"]))
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name, pts in curves.items():
        pts = sorted(pts, reverse=True)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="x", label=name)
    _loglog_steps_axis(ax, max(r["n_steps"] for r in rows))
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def ladder_figure(rungs: Sequence[dict[str, Any]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ns = [r["n_steps"] for r in rungs]
    ax.plot(ns, [r["energy_distance"] for r in rungs], marker="x", label="energy distance")
    agree = [(r["n_steps"], r["agreement"]) for r in rungs if r.get("agreement") is not None]
    if agree:
        ax.plot([a[0] for a in agree], [a[1] for a in agree], marker="o", label="agreement")
    _loglog_steps_axis(ax, max(ns))
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def fast_schedule_figure(rows: list[dict[str, Any]], path: str | Path) -> Path:
    schedules: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        schedules.setdefault(r["schedule"], []).append((r["n_steps"], r["energy_distance"]))
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name, pts in schedules.items():
        pts = sorted(pts, reverse=True)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="x", label=name)
    _loglog_steps_axis(ax, max(r["n_steps"] for r in rows))
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def ablation_figure(rows: list[dict[str, Any]], path: str | Path) -> Path:
    labels = [f"{r['parameterization']}\n{r['weighting']}" for r in rows]
    x = np.arange(len(rows))
    stoch = [r["stochastic"] if r["status"] == "ok" else np.nan for r in rows]
    ddim = [r["ddim"] if r["status"] == "ok" else np.nan for r in rows]
    fig, ax = plt.subplots(figsize=(max(8, len(rows)), 4))
    ax.bar(x - 0.2, stoch, width=0.4, label="stochastic")
    ax.bar(x + 0.2, ddim, width=0.4, label="ddim")
    for i, r in enumerate(rows):
        if r["status"] != "ok":
            ax.text(i, 0.0, "N/A", ha="center", va="bottom")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("energy distance")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)

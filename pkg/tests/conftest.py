"""Shared fixtures: trained checkpoints reused across test modules.

The heavier pipelines (ring training and the full distillation ladder) are
session-scoped so the end-to-end tests and the invariant tests share one run.
"""

import pytest

from stepdistill.data_metrics import ToyDataset
from stepdistill.diffusion import LossWeighting, Parameterization
from stepdistill.distill import DistillConfig, RungEvalSettings, progressive_distill
from stepdistill.training import TrainConfig, train_original


@pytest.fixture(scope="session")
def gauss_base():
    """5k-update 1-D Gaussian model (v-parameterization, SNR+1)."""
    cfg = TrainConfig(
        dataset=ToyDataset(kind="gauss1d"),
        parameterization=Parameterization.V,
        weighting=LossWeighting.SNR_PLUS_ONE,
        total_updates=5000,
        seed=11,
    )
    return train_original(cfg)


@pytest.fixture(scope="session")
def ring_base():
    """Desk-scale 2-D ring base model: 20k updates, defaults otherwise."""
    cfg = TrainConfig(
        dataset=ToyDataset(kind="ring8"),
        parameterization=Parameterization.V,
        weighting=LossWeighting.SNR_PLUS_ONE,
        total_updates=20_000,
        seed=2024,
    )
    ckpt, _curve = train_original(cfg)
    return ckpt


@pytest.fixture(scope="session")
def ring_ladder(ring_base):
    """Full 64 -> 1 halving ladder on the ring model, default budgets."""
    cfg = DistillConfig(start_steps=64, end_steps=1, step_divisor=2, seed=2024)
    settings = RungEvalSettings(count=10_000, agreement_count=1000, seed=9999)
    return progressive_distill(
        ring_base, ToyDataset(kind="ring8"), cfg, eval_settings=settings
    )

"""Standard continuous-time diffusion training on toy datasets.

Each update draws a data batch, per-example times t ~ U(eps, 1-eps), and unit
Gaussian noise; forms z_t = alpha_t*x + sigma_t*eps; and regresses the
model's implied clean-data prediction onto x under the configured loss
weighting. The optimizer stack is Adam with global-norm clipping, decoupled
weight decay and an EMA shadow; the EMA weights are what checkpoints are
evaluated with.

All randomness flows from the config seed through named streams, so a rerun
with the same config reproduces the loss curve and checkpoint bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .data_metrics import ToyDataset
from .diffusion import LossWeighting, Parameterization, loss_weights
from .net import GradientError, Model, anneal_lr, forward, init_opt_state, step, value_and_grad
from .rngstream import stream
from .schedule import ZeroSnrError, alphas_sigmas, log_snrs

__all__ = [
    "TrainConfig",
    "DivergenceError",
    "LossCurvePoint",
    "effective_ema_decay",
    "make_x_loss_fn",
    "train_original",
]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def effective_ema_decay(decay: float | None, updates: int) -> float:
    """EMA decay for a run of the given length.

    ``None`` selects the default rule min(0.9999, 1 - 5/updates): the shadow
    averages roughly the last fifth of the run, and at 50k+ updates per run
    this reduces to the standard 0.9999. A fixed horizon of 1/(1-0.9999) =
    10k updates would swamp short desk-scale runs with their initialization.
    """
    if decay is not None:
        return decay
    if updates <= 0:
        return 0.9999
    return min(0.9999, 1.0 - 5.0 / updates)


@dataclass(frozen=True)
class TrainConfig:
    dataset: ToyDataset
    parameterization: Parameterization = Parameterization.V
    weighting: LossWeighting = LossWeighting.SNR_PLUS_ONE
    batch_size: int = 256
    total_updates: int = 20_000
    base_lr: float = 3e-4
    seed: int = 0
    eval_every: int = 500
    hidden_dims: tuple[int, ...] = (128, 128, 128)
    time_embed_dim: int = 16
    activation: str = "silu"
    discrete_grid: int | None = None
    time_epsilon: float = 1e-5
    ema_decay: float | None = None  # None: min(0.9999, 1 - 5/total_updates)
    clip_norm: float = 1.0
    weight_decay: float = 0.001
    anneal: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.total_updates < 0 or self.eval_every < 1:
            raise ValueError("batch_size/eval_every must be positive, total_updates nonnegative")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 < self.time_epsilon < 0.5:
            raise ValueError(f"time_epsilon must lie in (0, 0.5), got {self.time_epsilon}")
        if self.discrete_grid is not None and self.discrete_grid < 1:
            raise ValueError(f"discrete_grid must be >= 1, got {self.discrete_grid}")


@dataclass(frozen=True)
class LossCurvePoint:
    update: int
    raw_loss: float
    ema_eval: float | None = None


def make_x_loss_fn(
    z: np.ndarray,
    t: np.ndarray,
    target_x: np.ndarray,
    weighting: LossWeighting,
    param: Parameterization,
) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Loss closure mapping a raw network output to
    ``mean_b w(lsnr_b) * sum_d (x_hat - target)^2`` and its raw-output gradient.

    The gradient chains through the parameterization's raw -> x_hat map
    analytically, so backpropagation only ever sees the MLP itself.
    """
    alpha, sigma = alphas_sigmas(t)
    if param is Parameterization.EPS and np.any(alpha == 0.0):
        raise ZeroSnrError("eps-parameterization cannot train at the zero-SNR endpoint")
    alpha_c, sigma_c = alpha[:, None], sigma[:, None]
    w = loss_weights(log_snrs(t), weighting)[:, None]
    batch = z.shape[0]

    def loss_fn(raw: np.ndarray) -> tuple[float, np.ndarray]:
        if param is Parameterization.X:
            x_hat = raw
        elif param is Parameterization.EPS:
            x_hat = (z - sigma_c * raw) / alpha_c
        elif param is Parameterization.XEPS_COMBINED:
            d = raw.shape[-1] // 2
            x_hat = sigma_c**2 * raw[:, :d] + alpha_c * (z - sigma_c * raw[:, d:])
        else:  # V
            x_hat = alpha_c * z - sigma_c * raw
        diff = x_hat - target_x
        loss = float(np.mean(np.sum(w * diff * diff, axis=-1)))
        d_x_hat = 2.0 * w * diff / batch
        if param is Parameterization.X:
            d_raw = d_x_hat
        elif param is Parameterization.EPS:
            d_raw = d_x_hat * (-sigma_c / alpha_c)
        elif param is Parameterization.XEPS_COMBINED:
            d_raw = np.concatenate([d_x_hat * sigma_c**2, d_x_hat * (-alpha_c * sigma_c)], axis=-1)
        else:  # V
            d_raw = d_x_hat * (-sigma_c)
        return loss, d_raw

    return loss_fn


def _draw_times(cfg: TrainConfig, rng: np.random.Generator, batch: int) -> np.ndarray:
    if cfg.discrete_grid is not None:
        n = cfg.discrete_grid
        return rng.integers(1, n + 1, size=batch) / n
    return rng.uniform(cfg.time_epsilon, 1.0 - cfg.time_epsilon, size=batch)


def train_original(cfg: TrainConfig) -> tuple[Checkpoint, list[LossCurvePoint]]:
    """Train a denoising model from scratch; returns the checkpoint (EMA
    weights included) and the loss curve."""
    data_rng = stream(cfg.seed, "train", "data")
    time_rng = stream(cfg.seed, "train", "time")
    noise_rng = stream(cfg.seed, "train", "noise")
    init_rng = stream(cfg.seed, "train", "init")
    probe_rng = stream(cfg.seed, "train", "probe")

    dim = cfg.dataset.dim
    model = Model.initialize(
        input_dim=dim,
        parameterization=cfg.parameterization,
        rng=init_rng,
        hidden_dims=cfg.hidden_dims,
        time_embed_dim=cfg.time_embed_dim,
        activation=cfg.activation,
    )
    opt = init_opt_state(
        model.params,
        base_lr=cfg.base_lr,
        ema_decay=effective_ema_decay(cfg.ema_decay, cfg.total_updates),
        clip_norm=cfg.clip_norm,
        weight_decay=cfg.weight_decay,
    )

    # fixed probe batch for the EMA evaluation column of the loss curve
    probe_x = cfg.dataset.sample(512, probe_rng)
    probe_t = probe_rng.uniform(cfg.time_epsilon, 1.0 - cfg.time_epsilon, size=512)
    probe_eps = probe_rng.standard_normal((512, dim))
    probe_alpha, probe_sigma = alphas_sigmas(probe_t)
    probe_z = probe_alpha[:, None] * probe_x + probe_sigma[:, None] * probe_eps
    probe_loss_fn = make_x_loss_fn(probe_z, probe_t, probe_x, cfg.weighting, cfg.parameterization)
    probe_lam = log_snrs(probe_t)

    def ema_probe_loss() -> float:
        raw = forward(opt.ema, model.config, probe_z, probe_lam)
        loss, _ = probe_loss_fn(raw)
        return loss

    curve: list[LossCurvePoint] = []
    for update in range(cfg.total_updates):
        x = cfg.dataset.sample(cfg.batch_size, data_rng)
        t = _draw_times(cfg, time_rng, cfg.batch_size)
        eps = noise_rng.standard_normal((cfg.batch_size, dim))
        alpha, sigma = alphas_sigmas(t)
        z = alpha[:, None] * x + sigma[:, None] * eps
        loss_fn = make_x_loss_fn(z, t, x, cfg.weighting, cfg.parameterization)
        if cfg.anneal:
            anneal_lr(opt, update / cfg.total_updates)
        try:
            loss, grads = value_and_grad(model.params, model.config, z, log_snrs(t), loss_fn)
            step(model.params, grads, opt)
        except GradientError as exc:
            raise DivergenceError(
                f"training diverged at update {update}: {exc} "
                f"(parameterization={cfg.parameterization.value}, weighting={cfg.weighting.value}, "
                f"lr={opt.lr:g})"
            ) from exc
        ema_eval = None
        if (update + 1) % cfg.eval_every == 0 or update + 1 == cfg.total_updates:
            ema_eval = ema_probe_loss()
        curve.append(LossCurvePoint(update=update + 1, raw_loss=loss, ema_eval=ema_eval))

    model.ema_params = np.array(opt.ema, copy=True)
    metadata = {
        "kind": "original",
        "dataset": {
            "kind": cfg.dataset.kind,
            "mean": cfg.dataset.mean,
            "variance": cfg.dataset.variance,
            "radius": cfg.dataset.radius,
            "mode_std": cfg.dataset.mode_std,
            "noise": cfg.dataset.noise,
        },
        "parameterization": cfg.parameterization.value,
        "weighting": cfg.weighting.value,
        "batch_size": cfg.batch_size,
        "total_updates": cfg.total_updates,
        "base_lr": cfg.base_lr,
        "seed": cfg.seed,
        "discrete_grid": cfg.discrete_grid,
        "final_probe_loss": curve[-1].ema_eval if curve else None,
    }
    return (
        Checkpoint(
            model=model,
            opt_m=np.array(opt.m, copy=True),
            opt_v=np.array(opt.v, copy=True),
            adam_step=opt.step,
            metadata=metadata,
        ),
        curve,
    )

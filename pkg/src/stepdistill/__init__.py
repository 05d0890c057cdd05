"""Toy-scale continuous-time diffusion models with progressive step-count
distillation: stable parameterizations, deterministic and stochastic
samplers, and the training/distillation loops to study them end to end."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data_metrics import ToyDataset, agreement, energy_distance, generate, wasserstein1
from .diffusion import (
    GaussianOracleDenoiser,
    Latent,
    LossWeighting,
    Parameterization,
    Prediction,
    forward_sample,
    loss_weight,
    oracle_gaussian_denoiser,
    posterior,
    to_prediction,
    training_loss,
    transition_variance,
    v_of,
)
from .distill import (
    DistillConfig,
    DistillLadder,
    distill_iteration,
    distill_target,
    progressive_distill,
)
from .net import Model, MlpConfig, OptState, anneal_lr, step
from .samplers import (
    SamplerKind,
    SamplerSpec,
    Trajectory,
    ancestral_step,
    ddim_step,
    ddim_step_angular,
    ddim_step_logsnr,
    euler_step,
    prob_flow_rhs,
    rk4_step,
    sample,
    sample_batch,
    stoch_interp_step,
)
from .schedule import (
    SchedulePoint,
    StepGrid,
    ZeroSnrError,
    alpha_sigma,
    log_snr_to_alpha_sigma,
    make_grid,
)
from .training import DivergenceError, TrainConfig, train_original

__version__ = "0.1.0"

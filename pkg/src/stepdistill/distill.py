"""Progressive distillation: repeatedly halve a deterministic sampler's step count.

Each iteration trains a student (initialized as a copy of its teacher) on the
student's discrete time grid t = i/N, i in {1..N}, which includes the exact
zero-SNR point t=1. The regression target is the clean-data value that makes
a single student DDIM step from z_t land exactly where two teacher DDIM
half-steps land:

    t' = t - 0.5/N,  t'' = t - 1/N
    z'  = one teacher DDIM step t  -> t'
    z'' = one teacher DDIM step t' -> t''
    x_target = (z'' - (sigma_t''/sigma_t) * z_t) / (alpha_t'' - (sigma_t''/sigma_t) * alpha_t)

The target is fully determined by (z_t, t, N, teacher). After an iteration
the student becomes the next teacher and N is divided by the configured
divisor (2, or 4 for the fast schedule, where the target is still built from
two teacher half-steps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .data_metrics import ToyDataset, agreement, energy_distance, generate, wasserstein1
from .diffusion import GaussianOracleDenoiser, LossWeighting, Prediction
from .net import GradientError, Model, anneal_lr, init_opt_state, step, value_and_grad
from .rngstream import stream
from .samplers import Denoiser, SamplerKind, SamplerSpec, ddim_step_from_x_hat, sample_batch
from .schedule import SchedulePoint, ScheduleError, alpha_sigma, alphas_sigmas, log_snrs, make_grid
from .training import DivergenceError, effective_ema_decay, make_x_loss_fn

__all__ = [
    "DistillConfig",
    "DistillLadder",
    "LadderRung",
    "DegenerateTargetError",
    "distill_target",
    "distill_targets",
    "distill_iteration",
    "progressive_distill",
    "PerfectStudentDenoiser",
    "model_x_hat_fn",
    "oracle_x_hat_fn",
    "rung_step_counts",
]

XHatFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DegenerateTargetError(ArithmeticError):
    """Target denominator vanished; impossible on a strictly monotone schedule."""


@dataclass(frozen=True)
class DistillConfig:
    start_steps: int = 64
    end_steps: int = 1
    updates_per_iteration: int = 4000
    updates_small_n: int = 8000  # override for student step counts 1 and 2
    step_divisor: int = 2
    base_lr: float = 2e-4
    batch_size: int = 256
    seed: int = 0
    weighting: LossWeighting | None = None  # None: inherit from the teacher checkpoint
    teacher_uses_ema: bool = True
    ema_decay: float | None = None  # None: min(0.9999, 1 - 5/updates) per iteration
    clip_norm: float = 1.0
    weight_decay: float = 0.001

    def __post_init__(self):
        if self.step_divisor not in (2, 4):
            raise ValueError(f"step_divisor must be 2 or 4, got {self.step_divisor}")
        if self.end_steps < 1 or self.start_steps < self.end_steps:
            raise ValueError("need start_steps >= end_steps >= 1")
        rung_step_counts(self.start_steps, self.end_steps, self.step_divisor)  # validates


def rung_step_counts(start_steps: int, end_steps: int, divisor: int) -> list[int]:
    """Student step counts per iteration, e.g. 64 -> [32, 16, 8, 4, 2, 1]."""
    counts, n = [], start_steps
    while n > end_steps:
        if n % divisor != 0:
            raise ValueError(
                f"start_steps={start_steps} is not divisible down to end_steps={end_steps} "
                f"by {divisor}"
            )
        n //= divisor
        counts.append(n)
    if n != end_steps:
        raise ValueError(f"cannot reach end_steps={end_steps} from {start_steps} by /{divisor}")
    return counts


def model_x_hat_fn(model: Model, use_ema: bool = True) -> XHatFn:
    """Teacher interface for target generation: (z, t) -> x_hat, batched."""

    def x_hat(z: np.ndarray, t: np.ndarray) -> np.ndarray:
        return model.predict(z, t, use_ema=use_ema).x_hat

    return x_hat


def oracle_x_hat_fn(oracle: GaussianOracleDenoiser) -> XHatFn:
    def x_hat(z: np.ndarray, t: np.ndarray) -> np.ndarray:
        alpha, sigma = alphas_sigmas(np.asarray(t, dtype=np.float64))
        return oracle.x_hat(z, alpha[:, None], sigma[:, None])

    return x_hat


def distill_targets(z: np.ndarray, t: np.ndarray, n_steps: int, teacher: XHatFn) -> np.ndarray:
    """Vectorized distillation targets for a batch of (z_t, t) on the N-grid."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    t_mid = t - 0.5 / n_steps
    t_end = np.maximum(t - 1.0 / n_steps, 0.0)
    a_t, s_t = alphas_sigmas(t)
    a_mid, s_mid = alphas_sigmas(t_mid)
    a_end, s_end = alphas_sigmas(t_end)
    a_t, s_t, a_mid, s_mid, a_end, s_end = (
        c[:, None] for c in (a_t, s_t, a_mid, s_mid, a_end, s_end)
    )

    x_hat_t = teacher(z, t)
    z_mid = a_mid * x_hat_t + (s_mid / s_t) * (z - a_t * x_hat_t)
    x_hat_mid = teacher(z_mid, t_mid)
    z_end = a_end * x_hat_mid + (s_end / s_mid) * (z_mid - a_mid * x_hat_mid)

    ratio = s_end / s_t
    den = a_end - ratio * a_t
    if np.any(np.abs(den) < 1e-12):
        raise DegenerateTargetError("target denominator below 1e-12")
    return (z_end - ratio * z) / den


def distill_target(z_t: np.ndarray, t: float, teacher: Denoiser, n_steps: int) -> np.ndarray:
    """Scalar-time distillation target using a (z, SchedulePoint) denoiser.

    ``t`` must be a grid time i/N with i in {1..N}. A single student DDIM
    step from z_t with this prediction reproduces the two-step teacher state
    exactly.
    """
    i = round(t * n_steps)
    if not (1 <= i <= n_steps and math.isclose(t, i / n_steps, rel_tol=0, abs_tol=1e-12)):
        raise ScheduleError(f"t={t} does not lie on the grid i/{n_steps}, i in 1..{n_steps}")
    pt_t = alpha_sigma(t)
    pt_mid = alpha_sigma(t - 0.5 / n_steps)
    pt_end = alpha_sigma(max(t - 1.0 / n_steps, 0.0))
    z_t = np.asarray(z_t, dtype=np.float64)

    z_mid = ddim_step_from_x_hat(z_t, teacher(z_t, pt_t).x_hat, pt_t, pt_mid)
    z_end = ddim_step_from_x_hat(z_mid, teacher(z_mid, pt_mid).x_hat, pt_mid, pt_end)

    ratio = pt_end.sigma / pt_t.sigma
    den = pt_end.alpha - ratio * pt_t.alpha
    if abs(den) < 1e-12:
        raise DegenerateTargetError("target denominator below 1e-12")
    target = (z_end - ratio * z_t) / den
    return np.asarray(target).reshape(z_t.shape)  # denoisers may batch internally


@dataclass(frozen=True)
class PerfectStudentDenoiser:
    """A fabricated zero-loss student: predicts the exact distillation target.

    With this denoiser, N-step DDIM trajectories coincide with the teacher's
    2N-step trajectories by construction. Only valid at grid times i/N.
    """

    teacher: Denoiser
    n_steps: int

    def __call__(self, z: np.ndarray, pt: SchedulePoint) -> Prediction:
        x_hat = distill_target(z, pt.t, self.teacher, self.n_steps)
        zeros = np.zeros_like(x_hat)
        if pt.sigma == 0.0:
            return Prediction(x_hat=x_hat, eps_hat=zeros, v_hat=zeros)
        eps_hat = (z - pt.alpha * x_hat) / pt.sigma
        return Prediction(x_hat=x_hat, eps_hat=eps_hat, v_hat=pt.alpha * eps_hat - pt.sigma * x_hat)


def distill_iteration(
    teacher: Checkpoint,
    n_student: int,
    dataset: ToyDataset,
    cfg: DistillConfig,
    updates: int | None = None,
) -> Checkpoint:
    """One distillation iteration: train a copy of the teacher so that one of
    its DDIM steps on the N-grid matches two teacher half-steps."""
    if n_student < 1:
        raise ValueError(f"n_student must be >= 1, got {n_student}")
    if updates is None:
        updates = cfg.updates_small_n if n_student <= 2 else cfg.updates_per_iteration
    student = teacher.model.copy()
    weighting = cfg.weighting or LossWeighting(teacher.metadata.get("weighting", "snr-plus-one"))
    opt = init_opt_state(
        student.params,
        base_lr=cfg.base_lr,
        ema_decay=effective_ema_decay(cfg.ema_decay, updates),
        clip_norm=cfg.clip_norm,
        weight_decay=cfg.weight_decay,
    )
    opt.ema = np.array(student.ema_params, copy=True)
    teach = model_x_hat_fn(teacher.model, use_ema=cfg.teacher_uses_ema)

    data_rng = stream(cfg.seed, "distill", n_student, "data")
    time_rng = stream(cfg.seed, "distill", n_student, "time")
    noise_rng = stream(cfg.seed, "distill", n_student, "noise")

    dim = dataset.dim
    for update in range(updates):
        x = dataset.sample(cfg.batch_size, data_rng)
        i = time_rng.integers(1, n_student + 1, size=cfg.batch_size)
        t = i / n_student
        eps = noise_rng.standard_normal((cfg.batch_size, dim))
        alpha, sigma = alphas_sigmas(t)
        z = alpha[:, None] * x + sigma[:, None] * eps
        targets = distill_targets(z, t, n_student, teach)
        loss_fn = make_x_loss_fn(z, t, targets, weighting, student.parameterization)
        anneal_lr(opt, update / updates)
        try:
            _, grads = value_and_grad(student.params, student.config, z, log_snrs(t), loss_fn)
            step(student.params, grads, opt)
        except GradientError as exc:
            raise DivergenceError(
                f"distillation to {n_student} steps diverged at update {update}: {exc}"
            ) from exc

    student.ema_params = np.array(opt.ema, copy=True)
    metadata = dict(teacher.metadata)
    metadata.update(
        {
            "kind": "distilled",
            "n_steps": n_student,
            "distill_updates": updates,
            "distill_base_lr": cfg.base_lr,
            "distill_seed": cfg.seed,
            "weighting": weighting.value,
            "teacher_kind": teacher.metadata.get("kind", "unknown"),
            "teacher_n_steps": teacher.metadata.get("n_steps"),
            "teacher_uses_ema": cfg.teacher_uses_ema,
        }
    )
    return Checkpoint(
        model=student,
        opt_m=np.array(opt.m, copy=True),
        opt_v=np.array(opt.v, copy=True),
        adam_step=opt.step,
        metadata=metadata,
    )


@dataclass(frozen=True)
class LadderRung:
    n_steps: int
    checkpoint: Checkpoint
    updates: int
    energy_distance: float | None = None
    w1: float | None = None
    agreement: float | None = None


@dataclass
class DistillLadder:
    """Sequence of (step count, checkpoint) produced by progressive distillation.

    Rung 0 is the undistilled base model at ``start_steps``."""

    rungs: list[LadderRung] = field(default_factory=list)

    def step_counts(self) -> list[int]:
        return [r.n_steps for r in self.rungs]


@dataclass(frozen=True)
class RungEvalSettings:
    count: int = 10_000
    agreement_count: int = 1000
    seed: int = 9999


def _rung_metrics(
    ckpt: Checkpoint,
    teacher: Checkpoint | None,
    n_steps: int,
    dataset: ToyDataset,
    settings: RungEvalSettings,
) -> tuple[float, float | None, float | None]:
    denoiser = ckpt.model.denoiser(use_ema=True)
    samples = sample_batch(
        denoiser,
        SamplerSpec(kind=SamplerKind.DDIM),
        make_grid(n_steps),
        seed=settings.seed,
        count=settings.count,
        dim=dataset.dim,
    )
    reference = generate(dataset, settings.count, settings.seed)
    ed = energy_distance(samples, reference)
    w1 = wasserstein1(samples, reference) if dataset.dim == 1 else None
    agree = None
    if teacher is not None:
        agree = agreement(
            teacher.model.denoiser(use_ema=True),
            denoiser,
            n_steps,
            count=settings.agreement_count,
            seed=settings.seed,
            dim=dataset.dim,
        )
    return ed, w1, agree


def progressive_distill(
    base: Checkpoint,
    dataset: ToyDataset,
    cfg: DistillConfig,
    eval_settings: RungEvalSettings | None = None,
    on_rung: Callable[[LadderRung], None] | None = None,
) -> DistillLadder:
    """Run the full ladder from ``cfg.start_steps`` down to ``cfg.end_steps``,
    evaluating every rung (energy distance to the data, agreement with its
    direct teacher)."""
    settings = eval_settings or RungEvalSettings()
    ladder = DistillLadder()

    ed, w1, _ = _rung_metrics(base, None, cfg.start_steps, dataset, settings)
    rung = LadderRung(
        n_steps=cfg.start_steps, checkpoint=base, updates=0, energy_distance=ed, w1=w1
    )
    ladder.rungs.append(rung)
    if on_rung:
        on_rung(rung)

    teacher = base
    for n_student in rung_step_counts(cfg.start_steps, cfg.end_steps, cfg.step_divisor):
        student = distill_iteration(teacher, n_student, dataset, cfg)
        ed, w1, agree = _rung_metrics(student, teacher, n_student, dataset, settings)
        rung = LadderRung(
            n_steps=n_student,
            checkpoint=student,
            updates=student.metadata["distill_updates"],
            energy_distance=ed,
            w1=w1,
            agreement=agree,
        )
        ladder.rungs.append(rung)
        if on_rung:
            on_rung(rung)
        teacher = student
    return ladder

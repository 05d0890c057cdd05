"""Samplers: DDIM in three equivalent forms, ancestral-gamma, and fixed-step
ODE integration of the probability flow in log-SNR space.

All step functions move a latent from a higher time t to a lower time s < t
(equivalently from lower to higher log-SNR). A *denoiser* is any callable
``(z, SchedulePoint) -> Prediction``; trained models are adapted through
:class:`stepdistill.net.ModelDenoiser` and the analytic Gaussian posterior
mean through :class:`stepdistill.diffusion.GaussianOracleDenoiser`.

The three DDIM forms:

* plain:   z_s = alpha_s * x_hat + sigma_s * (z_t - alpha_t * x_hat) / sigma_t
* log-SNR: z_s = r * (alpha_s/alpha_t) * z_t + (1 - r) * alpha_s * x_hat,
           with r = exp((lsnr_t - lsnr_s)/2)
* angular: z_{phi-delta} = cos(delta) * z_phi - sin(delta) * v_hat

agree to floating-point accuracy wherever all are defined. The plain form
only divides by sigma_t, so it covers the zero-SNR start (where it reduces
exactly to the angular form); the log-SNR form needs alpha_t > 0.

Full trajectories start at z_1 ~ N(0, I). Randomness is drawn from one
counter-based stream per sample index, keyed by (seed, "sample", index), so
batched generation and single-trajectory generation see identical noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .diffusion import Prediction
from .rngstream import stream
from .schedule import (
    LOG_SNR_CLAMP,
    SchedulePoint,
    ScheduleError,
    StepGrid,
    ZeroSnrError,
    alpha_sigma,
    half_snr_ratio,
    log_snr_to_alpha_sigma,
    snr_ratio,
)

__all__ = [
    "SamplerKind",
    "SamplerSpec",
    "Trajectory",
    "Denoiser",
    "ddim_step",
    "ddim_step_from_x_hat",
    "ddim_step_logsnr",
    "ddim_step_angular",
    "ancestral_step",
    "stoch_interp_step",
    "prob_flow_rhs",
    "euler_step",
    "rk4_step",
    "sample",
    "sample_batch",
    "integration_log_snrs",
]

Denoiser = Callable[[np.ndarray, SchedulePoint], Prediction]


class SamplerKind(str, Enum):
    DDIM = "ddim"
    DDIM_LOGSNR = "ddim-logsnr"
    DDIM_ANGULAR = "ddim-angular"
    ANCESTRAL = "ancestral"
    STOCH_INTERP = "stoch-interp"
    EULER = "euler"
    RK4 = "rk4"


_STOCHASTIC = {SamplerKind.ANCESTRAL, SamplerKind.STOCH_INTERP}


@dataclass(frozen=True)
class SamplerSpec:
    """A sampler kind plus its noise-interpolation coefficient (stochastic kinds)."""

    kind: SamplerKind
    noise_mix: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.noise_mix <= 1.0:
            raise ValueError(f"noise_mix must lie in [0, 1], got {self.noise_mix}")

    @property
    def stochastic(self) -> bool:
        return self.kind in _STOCHASTIC

    @classmethod
    def parse(cls, text: str) -> "SamplerSpec":
        """Parse "ddim", "ancestral:0.3", "stoch-interp:1", ..."""
        kind_text, _, coef = text.partition(":")
        kind = SamplerKind(kind_text)
        if coef and kind not in _STOCHASTIC:
            raise ValueError(f"sampler {kind.value!r} takes no coefficient")
        return cls(kind=kind, noise_mix=float(coef) if coef else 0.0)

    def label(self) -> str:
        if self.stochastic:
            return f"{self.kind.value}:{self.noise_mix:g}"
        return self.kind.value


@dataclass(frozen=True)
class Trajectory:
    """Latent path from t=1 down to t=0; states[0] is the seed noise."""

    times: tuple[float, ...]
    states: tuple[np.ndarray, ...]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def ddim_step_from_x_hat(
    z: np.ndarray, x_hat: np.ndarray, pt_t: SchedulePoint, pt_s: SchedulePoint
) -> np.ndarray:
    """Plain DDIM update given a precomputed clean-data prediction."""
    if pt_t.sigma == 0.0:
        raise ScheduleError("DDIM step undefined at sigma_t = 0")
    return pt_s.alpha * x_hat + pt_s.sigma * (z - pt_t.alpha * x_hat) / pt_t.sigma


def ddim_step(z: np.ndarray, t: float, s: float, denoiser: Denoiser) -> np.ndarray:
    """One deterministic DDIM step from time t to s < t."""
    if not s < t:
        raise ScheduleError(f"ddim_step requires s < t, got s={s}, t={t}")
    pt_t, pt_s = alpha_sigma(t), alpha_sigma(s)
    return ddim_step_from_x_hat(z, denoiser(z, pt_t).x_hat, pt_t, pt_s)


def ddim_step_logsnr(z: np.ndarray, t: float, s: float, denoiser: Denoiser) -> np.ndarray:
    """DDIM step in half-log-SNR form; needs alpha_t > 0 and sigma_t > 0."""
    if not s < t:
        raise ScheduleError(f"ddim_step_logsnr requires s < t, got s={s}, t={t}")
    pt_t, pt_s = alpha_sigma(t), alpha_sigma(s)
    if pt_t.zero_snr or pt_t.sigma == 0.0:
        raise ZeroSnrError("log-SNR DDIM form undefined at a schedule endpoint")
    r = half_snr_ratio(pt_t, pt_s)
    x_hat = denoiser(z, pt_t).x_hat
    return r * (pt_s.alpha / pt_t.alpha) * z + (1.0 - r) * pt_s.alpha * x_hat


def ddim_step_angular(z: np.ndarray, phi_t: float, delta: float, v_denoiser: Denoiser) -> np.ndarray:
    """DDIM step as a rotation by delta in the (z, v_hat) plane.

    Defined at every angle including phi_t = pi/2 (the zero-SNR start), where
    the x_hat form of the prediction may not exist for all parameterizations.
    """
    if not 0.0 < delta <= phi_t or phi_t > 0.5 * math.pi:
        raise ScheduleError(f"need 0 < delta <= phi_t <= pi/2, got delta={delta}, phi_t={phi_t}")
    t = phi_t / (0.5 * math.pi)
    v_hat = v_denoiser(z, alpha_sigma(min(t, 1.0))).v_hat
    return math.cos(delta) * z - math.sin(delta) * v_hat


def _ancestral_moments(
    z: np.ndarray, x_hat: np.ndarray, pt_t: SchedulePoint, pt_s: SchedulePoint, gamma: float
) -> tuple[np.ndarray, float]:
    ratio = snr_ratio(pt_t, pt_s)
    mean = ratio * (pt_s.alpha / pt_t.alpha) * z + (1.0 - ratio) * pt_s.alpha * x_hat
    var_lower = (1.0 - ratio) * pt_s.sigma**2  # posterior variance
    var_upper = (1.0 - ratio) * pt_t.sigma**2  # forward transition variance
    std = math.sqrt(var_lower ** (1.0 - gamma) * var_upper**gamma)
    return mean, std


def ancestral_step(
    z: np.ndarray,
    t: float,
    s: float,
    denoiser: Denoiser,
    gamma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Stochastic reverse step: posterior mean plus noise whose variance
    interpolates geometrically (exponent gamma) between the posterior
    variance and the forward transition variance."""
    if not s < t:
        raise ScheduleError(f"ancestral_step requires s < t, got s={s}, t={t}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    pt_t, pt_s = alpha_sigma(t), alpha_sigma(s)
    if pt_t.zero_snr:
        raise ZeroSnrError("ancestral step divides by alpha_t, undefined at the zero-SNR endpoint")
    mean, std = _ancestral_moments(z, denoiser(z, pt_t).x_hat, pt_t, pt_s, gamma)
    return mean + std * rng.standard_normal(np.shape(z))


def stoch_interp_step(
    z: np.ndarray,
    t: float,
    s: float,
    denoiser: Denoiser,
    coef: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Log-scale interpolation between the two variance bounds; the geometric
    form above is exactly that interpolation, so this is an alias."""
    return ancestral_step(z, t, s, denoiser, gamma=coef, rng=rng)


def _ancestral_step_from_pure_noise(
    z: np.ndarray, x_hat: np.ndarray, pt_s: SchedulePoint, gamma: float, noise: np.ndarray
) -> np.ndarray:
    # Zero-SNR limit of the ancestral moments: the coefficient on z vanishes,
    # the posterior variance tends to sigma_s^2 and the transition variance
    # to sigma_t^2 = 1.
    mean = pt_s.alpha * x_hat
    std = math.sqrt((pt_s.sigma**2) ** (1.0 - gamma))
    return mean + std * noise


def prob_flow_rhs(z: np.ndarray, log_snr: float, denoiser: Denoiser) -> np.ndarray:
    """Right-hand side of the probability-flow ODE in log-SNR form:

        dz/dlog_snr = 0.5 * (alpha * x_hat - alpha**2 * z)
    """
    pt = log_snr_to_alpha_sigma(log_snr)
    x_hat = denoiser(z, pt).x_hat
    return 0.5 * (pt.alpha * x_hat - pt.alpha**2 * z)


def euler_step(z: np.ndarray, log_snr_t: float, log_snr_s: float, denoiser: Denoiser) -> np.ndarray:
    """Explicit Euler step of the probability-flow ODE over one log-SNR interval."""
    h = log_snr_s - log_snr_t
    if not (math.isfinite(log_snr_t) and math.isfinite(log_snr_s)):
        raise ScheduleError("integration endpoints must be finite log-SNR values")
    if h == 0.0:
        return np.array(z, copy=True)
    return z + h * prob_flow_rhs(z, log_snr_t, denoiser)


def rk4_step(z: np.ndarray, log_snr_t: float, log_snr_s: float, denoiser: Denoiser) -> np.ndarray:
    """Classic fourth-order Runge-Kutta step over one log-SNR interval."""
    h = log_snr_s - log_snr_t
    if not (math.isfinite(log_snr_t) and math.isfinite(log_snr_s)):
        raise ScheduleError("integration endpoints must be finite log-SNR values")
    if h == 0.0:
        return np.array(z, copy=True)
    mid = log_snr_t + 0.5 * h
    k1 = prob_flow_rhs(z, log_snr_t, denoiser)
    k2 = prob_flow_rhs(z + 0.5 * h * k1, mid, denoiser)
    k3 = prob_flow_rhs(z + 0.5 * h * k2, mid, denoiser)
    k4 = prob_flow_rhs(z + h * k3, log_snr_s, denoiser)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integration_log_snrs(grid: StepGrid) -> list[float]:
    """Finite log-SNR node for every grid time, for the ODE integrators.

    The zero-SNR start t=1 maps to the log-SNR of t = 1 - 1/(2N) so the
    seed noise enters at a finite node; t=0 maps to +LOG_SNR_CLAMP (matching
    the network's conditioning clamp); interior nodes are clamped the same
    way for very fine grids.
    """
    out = []
    for t in grid.times:
        if t == 1.0:
            lam = alpha_sigma(1.0 - 1.0 / (2.0 * grid.n_steps)).log_snr
        elif t == 0.0:
            lam = LOG_SNR_CLAMP
        else:
            lam = alpha_sigma(t).log_snr
        out.append(min(max(lam, -LOG_SNR_CLAMP), LOG_SNR_CLAMP))
    return out


def _predict_at_source(
    denoiser: Denoiser, z: np.ndarray, pt_t: SchedulePoint, n_steps: int
) -> tuple[SchedulePoint, Prediction]:
    """Evaluate the denoiser at the step's source point.

    At the zero-SNR start, denoisers without an x prediction there (the
    eps-parameterization) get the same clamp the ODE integrators use: the
    step starts from t = 1 - 1/(2N) with the seed noise unchanged.
    """
    if pt_t.zero_snr:
        try:
            return pt_t, denoiser(z, pt_t)
        except ZeroSnrError:
            pt_eff = alpha_sigma(1.0 - 0.5 / n_steps)
            return pt_eff, denoiser(z, pt_eff)
    return pt_t, denoiser(z, pt_t)


def _advance(
    z: np.ndarray,
    j: int,
    points: Sequence[SchedulePoint],
    ode_nodes: Sequence[float],
    spec: SamplerSpec,
    denoiser: Denoiser,
    noise: np.ndarray | None,
    n_steps: int,
) -> np.ndarray:
    pt_s = points[j + 1]
    kind = spec.kind
    if kind is SamplerKind.EULER:
        return euler_step(z, ode_nodes[j], ode_nodes[j + 1], denoiser)
    if kind is SamplerKind.RK4:
        return rk4_step(z, ode_nodes[j], ode_nodes[j + 1], denoiser)
    pt_t, pred = _predict_at_source(denoiser, z, points[j], n_steps)
    if kind is SamplerKind.DDIM:
        # The plain form only divides by sigma_t; at the zero-SNR start it
        # coincides exactly with the angular/velocity form.
        return ddim_step_from_x_hat(z, pred.x_hat, pt_t, pt_s)
    if kind is SamplerKind.DDIM_LOGSNR:
        if pt_t.zero_snr:
            return ddim_step_from_x_hat(z, pred.x_hat, pt_t, pt_s)
        r = half_snr_ratio(pt_t, pt_s)
        return r * (pt_s.alpha / pt_t.alpha) * z + (1.0 - r) * pt_s.alpha * pred.x_hat
    if kind is SamplerKind.DDIM_ANGULAR:
        delta = pt_t.phi - pt_s.phi
        return math.cos(delta) * z - math.sin(delta) * pred.v_hat
    if kind in _STOCHASTIC:
        if pt_t.zero_snr:
            return _ancestral_step_from_pure_noise(z, pred.x_hat, pt_s, spec.noise_mix, noise)
        mean, std = _ancestral_moments(z, pred.x_hat, pt_t, pt_s, spec.noise_mix)
        return mean + std * noise
    raise ValueError(f"unknown sampler kind {kind}")  # pragma: no cover


def sample(
    denoiser: Denoiser,
    spec: SamplerSpec,
    grid: StepGrid,
    *,
    seed: int,
    dim: int,
    sample_index: int = 0,
) -> Trajectory:
    """Generate one full trajectory from seed noise down to t=0."""
    rng = stream(seed, "sample", sample_index)
    z = rng.standard_normal(dim)
    points = grid.points()
    ode_nodes = integration_log_snrs(grid)
    states = [np.array(z, copy=True)]
    for j in range(grid.n_steps):
        noise = rng.standard_normal(dim) if spec.stochastic else None
        z = _advance(z, j, points, ode_nodes, spec, denoiser, noise, grid.n_steps)
        states.append(np.array(z, copy=True))
    return Trajectory(times=grid.times, states=tuple(states))


def sample_batch(
    denoiser: Denoiser,
    spec: SamplerSpec,
    grid: StepGrid,
    *,
    seed: int,
    count: int,
    dim: int,
) -> np.ndarray:
    """Final samples for ``count`` independent seed-noise draws, batched.

    Each sample index owns the stream (seed, "sample", index), with the same
    draw order as :func:`sample`, so per-index results are reproducible and
    shared seeds give identical seed noise across models and step counts.
    """
    gens = [stream(seed, "sample", i) for i in range(count)]
    z = np.stack([g.standard_normal(dim) for g in gens])
    points = grid.points()
    ode_nodes = integration_log_snrs(grid)
    for j in range(grid.n_steps):
        noise = np.stack([g.standard_normal(dim) for g in gens]) if spec.stochastic else None
        z = _advance(z, j, points, ode_nodes, spec, denoiser, noise, grid.n_steps)
    return z

"""Forward process, posterior, prediction parameterizations, and loss weightings.

The forward process is ``z_t = alpha_t * x + sigma_t * eps`` with
``eps ~ N(0, I)``. A denoising model may emit its raw output in any of four
parameterizations; :func:`to_prediction` converts a raw output into a full
:class:`Prediction` with mutually consistent clean-data (``x_hat``), noise
(``eps_hat``) and velocity (``v_hat``) channels, where the velocity is
``v = alpha * eps - sigma * x``.

Training minimizes ``w(log_snr) * ||x_target - x_hat||^2`` (sum over
dimensions, mean over batch) for one of three weightings:

* ``SNR``:            w = exp(log_snr)             (equivalent to noise-space MSE),
* ``TRUNCATED_SNR``:  w = max(exp(log_snr), 1),
* ``SNR_PLUS_ONE``:   w = 1 + exp(log_snr)         (equivalent to velocity-space MSE).

At the zero-SNR endpoint the weights take their limits: 0, 1 and 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .schedule import (
    SchedulePoint,
    ScheduleError,
    ZeroSnrError,
    alpha_sigma,
    alphas_sigmas,
    snr_ratio,
)

__all__ = [
    "Parameterization",
    "LossWeighting",
    "Latent",
    "Prediction",
    "PosteriorParams",
    "PredictionError",
    "forward_sample",
    "transition_variance",
    "posterior",
    "to_prediction",
    "prediction_from_raw",
    "v_of",
    "loss_weight",
    "loss_weight_at",
    "loss_weights",
    "training_loss",
    "oracle_gaussian_denoiser",
    "GaussianOracleDenoiser",
    "time_density_of_log_snr",
    "weight_curve_rows",
]


class Parameterization(str, Enum):
    """Which quantity the raw network output represents."""

    X = "x"
    EPS = "eps"
    XEPS_COMBINED = "xeps"
    V = "v"

    @property
    def output_channels(self) -> int:
        return 2 if self is Parameterization.XEPS_COMBINED else 1


class LossWeighting(str, Enum):
    SNR = "snr"
    TRUNCATED_SNR = "truncated-snr"
    SNR_PLUS_ONE = "snr-plus-one"


class PredictionError(ValueError):
    """Raised when a prediction channel cannot be derived at the given point."""


@dataclass(frozen=True)
class Latent:
    """Noisy state z at diffusion time t."""

    z: np.ndarray
    t: float


@dataclass(frozen=True)
class Prediction:
    """Consistent triple of denoising predictions at one schedule point."""

    x_hat: np.ndarray
    eps_hat: np.ndarray
    v_hat: np.ndarray


@dataclass(frozen=True)
class PosteriorParams:
    """Mean and isotropic variance of q(z_s | z_t, x)."""

    mean: np.ndarray
    variance: float


def forward_sample(x: np.ndarray, t: float, eps: np.ndarray) -> Latent:
    """Draw z_t = alpha_t * x + sigma_t * eps for caller-supplied noise."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"x and eps shapes differ: {x.shape} vs {eps.shape}")
    pt = alpha_sigma(t)
    return Latent(z=pt.alpha * x + pt.sigma * eps, t=pt.t)


def transition_variance(s: float, t: float) -> float:
    """Variance of q(z_t | z_s) for s < t: ``(1 - e^(lsnr_t - lsnr_s)) * sigma_t**2``."""
    if not s < t:
        raise ScheduleError(f"transition_variance requires s < t, got s={s}, t={t}")
    pt_t = alpha_sigma(t)
    pt_s = alpha_sigma(s)
    return (1.0 - snr_ratio(pt_t, pt_s)) * pt_t.sigma**2


def posterior(latent: Latent, x: np.ndarray, s: float) -> PosteriorParams:
    """Parameters of q(z_s | z_t, x) for s <= t.

    mean     = e^(lsnr_t - lsnr_s) * (alpha_s / alpha_t) * z
             + (1 - e^(lsnr_t - lsnr_s)) * alpha_s * x
    variance = (1 - e^(lsnr_t - lsnr_s)) * sigma_s**2
    """
    if s > latent.t:
        raise ScheduleError(f"posterior requires s <= t, got s={s}, t={latent.t}")
    pt_t = alpha_sigma(latent.t)
    if pt_t.zero_snr:
        raise ZeroSnrError("posterior divides by alpha_t, undefined at the zero-SNR endpoint")
    x = np.asarray(x, dtype=np.float64)
    if s == latent.t:
        return PosteriorParams(mean=np.array(latent.z, dtype=np.float64, copy=True), variance=0.0)
    pt_s = alpha_sigma(s)
    ratio = snr_ratio(pt_t, pt_s)
    mean = ratio * (pt_s.alpha / pt_t.alpha) * latent.z + (1.0 - ratio) * pt_s.alpha * x
    return PosteriorParams(mean=mean, variance=(1.0 - ratio) * pt_s.sigma**2)


def _split_combined(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = raw.shape[-1]
    if d2 % 2 != 0:
        raise ValueError(f"combined output needs an even channel count, got {d2}")
    d = d2 // 2
    return raw[..., :d], raw[..., d:]


def prediction_from_raw(
    raw: np.ndarray,
    z: np.ndarray,
    alpha: np.ndarray | float,
    sigma: np.ndarray | float,
    param: Parameterization,
) -> Prediction:
    """Array-path conversion from a raw output to a consistent Prediction.

    ``alpha``/``sigma`` may be scalars or per-example columns broadcastable
    against ``z``. Requires sigma > 0 everywhere (all samplers and training
    times satisfy this); for EPS additionally alpha > 0.
    """
    raw = np.asarray(raw, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise PredictionError("prediction_from_raw requires sigma > 0")

    if param is Parameterization.X:
        x_hat = raw
    elif param is Parameterization.EPS:
        if np.any(alpha <= 0.0):
            raise ZeroSnrError("eps-parameterization is undefined at zero SNR (alpha=0)")
        x_hat = (z - sigma * raw) / alpha
    elif param is Parameterization.XEPS_COMBINED:
        x_raw, eps_raw = _split_combined(raw)
        x_hat = sigma**2 * x_raw + alpha * (z - sigma * eps_raw)
    elif param is Parameterization.V:
        x_hat = alpha * z - sigma * raw
    else:  # pragma: no cover
        raise ValueError(f"unknown parameterization {param}")

    eps_hat = (z - alpha * x_hat) / sigma
    v_hat = alpha * eps_hat - sigma * x_hat
    return Prediction(x_hat=x_hat, eps_hat=eps_hat, v_hat=v_hat)


def to_prediction(raw: np.ndarray, latent: Latent, param: Parameterization) -> Prediction:
    """Convert a raw model output at ``latent`` into a full Prediction.

    Defined for sigma > 0; at the t=0 endpoint (sigma=0) the clean-data
    channel still exists for X / XEPS_COMBINED / V and the remaining
    channels are filled from the raw output, while X alone cannot recover a
    noise direction there.
    """
    pt = alpha_sigma(latent.t)
    raw = np.asarray(raw, dtype=np.float64)
    z = np.asarray(latent.z, dtype=np.float64)
    if pt.sigma > 0.0:
        return prediction_from_raw(raw, z, pt.alpha, pt.sigma, param)

    # t == 0: alpha=1, sigma=0. x_hat per parameterization formula; the
    # noise/velocity channels coincide (v = eps at phi=0) and come straight
    # from the raw output where one exists.
    if param is Parameterization.X:
        raise PredictionError("noise direction is unrecoverable at t=0 for x-parameterization")
    if param is Parameterization.EPS:
        x_hat, eps_hat = np.array(z, copy=True), raw
    elif param is Parameterization.XEPS_COMBINED:
        x_raw, eps_raw = _split_combined(raw)
        x_hat, eps_hat = np.array(z, copy=True), eps_raw
    else:  # V
        x_hat, eps_hat = np.array(z, copy=True), raw
    return Prediction(x_hat=x_hat, eps_hat=eps_hat, v_hat=np.array(eps_hat, copy=True))


def v_of(x: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    """Velocity target v = alpha_t * eps - sigma_t * x."""
    pt = alpha_sigma(t)
    return pt.alpha * np.asarray(eps, dtype=np.float64) - pt.sigma * np.asarray(x, dtype=np.float64)


def loss_weight(log_snr: float, kind: LossWeighting) -> float:
    """Reconstruction-loss weight w(log_snr).

    Accepts IEEE -inf for the zero-SNR limit (exp(-inf) == 0 gives the limit
    values 0 / 1 / 1 without producing NaNs); see :func:`loss_weight_at` for
    the flagged SchedulePoint entry point.
    """
    snr = math.exp(log_snr) if log_snr != math.inf else math.inf
    if kind is LossWeighting.SNR:
        return snr
    if kind is LossWeighting.TRUNCATED_SNR:
        return max(snr, 1.0)
    if kind is LossWeighting.SNR_PLUS_ONE:
        return 1.0 + snr
    raise ValueError(f"unknown weighting {kind}")  # pragma: no cover


def loss_weight_at(pt: SchedulePoint, kind: LossWeighting) -> float:
    return loss_weight(-math.inf if pt.zero_snr else pt.log_snr, kind)


def loss_weights(log_snr: np.ndarray, kind: LossWeighting) -> np.ndarray:
    """Vectorized :func:`loss_weight`; -inf entries yield the limit weights."""
    snr = np.exp(np.asarray(log_snr, dtype=np.float64))
    if kind is LossWeighting.SNR:
        return snr
    if kind is LossWeighting.TRUNCATED_SNR:
        return np.maximum(snr, 1.0)
    if kind is LossWeighting.SNR_PLUS_ONE:
        return 1.0 + snr
    raise ValueError(f"unknown weighting {kind}")  # pragma: no cover


def training_loss(
    target_x: np.ndarray,
    pred: Prediction,
    log_snr: np.ndarray | float,
    kind: LossWeighting,
) -> float:
    """Weighted reconstruction loss: sum over dimensions, mean over batch."""
    target_x = np.asarray(target_x, dtype=np.float64)
    if target_x.shape != pred.x_hat.shape:
        raise ValueError(f"target shape {target_x.shape} != prediction shape {pred.x_hat.shape}")
    sq = np.sum((target_x - pred.x_hat) ** 2, axis=-1)
    w = loss_weights(np.asarray(log_snr, dtype=np.float64), kind)
    return float(np.mean(w * sq))


@dataclass(frozen=True)
class GaussianOracleDenoiser:
    """Exact posterior-mean denoiser for x ~ N(mean, variance), per dimension.

    For z = alpha*x + sigma*eps the conditional mean of x given z is

        x_hat = (alpha * variance * z + sigma**2 * mean) / (alpha**2 * variance + sigma**2)

    (conjugate-Gaussian algebra). Used as a closed-form stand-in for a
    trained network in sampler and convergence tests.
    """

    mean: float = 0.0
    variance: float = 1.0

    def x_hat(self, z: np.ndarray, alpha: np.ndarray | float, sigma: np.ndarray | float) -> np.ndarray:
        num = alpha * self.variance * z + sigma**2 * self.mean
        den = alpha**2 * self.variance + sigma**2
        return num / den

    def __call__(self, z: np.ndarray, pt: SchedulePoint) -> Prediction:
        z = np.asarray(z, dtype=np.float64)
        x_hat = self.x_hat(z, pt.alpha, pt.sigma)
        if pt.sigma == 0.0:
            return Prediction(x_hat=x_hat, eps_hat=np.zeros_like(z), v_hat=np.zeros_like(z))
        eps_hat = (z - pt.alpha * x_hat) / pt.sigma
        v_hat = pt.alpha * eps_hat - pt.sigma * x_hat
        return Prediction(x_hat=x_hat, eps_hat=eps_hat, v_hat=v_hat)


def oracle_gaussian_denoiser(latent: Latent, mean: float, variance: float) -> Prediction:
    """Analytic E[x | z_t] for Gaussian data; see :class:`GaussianOracleDenoiser`."""
    if variance <= 0.0:
        raise ValueError(f"variance must be positive, got {variance}")
    return GaussianOracleDenoiser(mean=mean, variance=variance)(latent.z, alpha_sigma(latent.t))


def time_density_of_log_snr(log_snr: np.ndarray) -> np.ndarray:
    """Density |dt/dlog_snr| of the log-SNR under t ~ U[0,1], cosine schedule.

    Analytically dt/dlog_snr = -alpha*sigma/pi, so the density is
    sqrt(sigmoid(l) * sigmoid(-l)) / pi.
    """
    log_snr = np.asarray(log_snr, dtype=np.float64)
    # stable sigmoid(l)*sigmoid(-l) = 1/((1+e^l)(1+e^-l)); evaluate via e^-|l|
    e = np.exp(-np.abs(log_snr))
    prod = e / (1.0 + e) ** 2
    return np.sqrt(prod) / np.pi


def weight_curve_rows(log_snr_grid: np.ndarray) -> list[dict[str, float]]:
    """Loss-weight curves on a log-SNR grid, excluding and including the
    time-sampling density of the cosine schedule. No normalization is applied."""
    rows = []
    lams = np.asarray(log_snr_grid, dtype=np.float64)
    density = time_density_of_log_snr(lams)
    for lam, dens in zip(lams, density):
        w_snr = loss_weight(lam, LossWeighting.SNR)
        w_trunc = loss_weight(lam, LossWeighting.TRUNCATED_SNR)
        w_plus = loss_weight(lam, LossWeighting.SNR_PLUS_ONE)
        rows.append(
            {
                "log_snr": float(lam),
                "snr": w_snr,
                "truncated_snr": w_trunc,
                "snr_plus_one": w_plus,
                "density": float(dens),
                "snr_incl_schedule": w_snr * float(dens),
                "truncated_snr_incl_schedule": w_trunc * float(dens),
                "snr_plus_one_incl_schedule": w_plus * float(dens),
            }
        )
    return rows

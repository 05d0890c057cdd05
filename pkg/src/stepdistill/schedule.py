"""Variance-preserving cosine noise schedule and time/log-SNR/angle conversions.

Conventions used throughout the package:

* time ``t`` runs in [0, 1]; t=0 is clean data, t=1 is pure noise,
* ``alpha_t = cos(0.5*pi*t)`` and ``sigma_t = sin(0.5*pi*t)``, so that
  ``alpha**2 + sigma**2 == 1`` (variance preserving),
* the log signal-to-noise ratio ``log_snr = log(alpha**2 / sigma**2)``
  decreases strictly with t, from +inf at t=0 to -inf at t=1,
* the angle ``phi = arctan(sigma / alpha)`` equals ``0.5*pi*t`` exactly for
  the cosine schedule.

The t=1 endpoint has exactly zero SNR. Rather than letting -inf (and the
NaNs it breeds) propagate, :class:`SchedulePoint` marks that point with a
``zero_snr`` flag and ``point.log_snr`` raises :class:`ZeroSnrError` there.
Operations that are only defined for positive signal level must refuse the
flagged point; operations with a well-defined limit handle it explicitly
(see :func:`snr_ratio`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "COSINE",
    "LOG_SNR_CLAMP",
    "ScheduleError",
    "ZeroSnrError",
    "SchedulePoint",
    "StepGrid",
    "alpha_sigma",
    "log_snr_to_alpha_sigma",
    "make_grid",
    "snr_ratio",
    "half_snr_ratio",
    "alphas_sigmas",
    "log_snrs",
]

#: Tag of the only schedule this package ships.
COSINE = "cosine"

#: Conditioning clamp for log-SNR values fed to the network. The zero-SNR
#: endpoint is mapped to -LOG_SNR_CLAMP; the t=0 endpoint to +LOG_SNR_CLAMP.
LOG_SNR_CLAMP = 20.0


class ScheduleError(ValueError):
    """Raised for out-of-domain schedule arguments."""


class ZeroSnrError(ScheduleError):
    """Raised when an operation requires positive signal level at t=1."""


@dataclass(frozen=True)
class SchedulePoint:
    """Schedule coefficients at one diffusion time.

    ``log_snr`` is computed on demand from alpha/sigma; at the zero-SNR
    endpoint it raises instead of returning -inf. At t=0 it is +inf (that
    endpoint is harmless: nothing divides by sigma there without checking).
    """

    t: float
    alpha: float
    sigma: float
    phi: float
    zero_snr: bool = False

    @property
    def log_snr(self) -> float:
        if self.zero_snr:
            raise ZeroSnrError("log-SNR is -inf at the zero-SNR endpoint t=1")
        if self.sigma == 0.0:
            return math.inf
        return 2.0 * math.log(self.alpha / self.sigma)

    @property
    def conditioning_log_snr(self) -> float:
        """log-SNR clamped to [-LOG_SNR_CLAMP, LOG_SNR_CLAMP] for network input."""
        if self.zero_snr:
            return -LOG_SNR_CLAMP
        return min(max(self.log_snr, -LOG_SNR_CLAMP), LOG_SNR_CLAMP)


def alpha_sigma(t: float) -> SchedulePoint:
    """Schedule coefficients of the cosine schedule at time ``t`` in [0, 1].

    The endpoints are exact: (alpha, sigma) is (1, 0) at t=0 and (0, 1) at
    t=1, with the latter carrying the zero-SNR flag.
    """
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ScheduleError(f"time must lie in [0, 1], got {t}")
    if t == 0.0:
        return SchedulePoint(t=0.0, alpha=1.0, sigma=0.0, phi=0.0)
    if t == 1.0:
        return SchedulePoint(t=1.0, alpha=0.0, sigma=1.0, phi=0.5 * math.pi, zero_snr=True)
    phi = 0.5 * math.pi * t
    return SchedulePoint(t=t, alpha=math.cos(phi), sigma=math.sin(phi), phi=phi)


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def log_snr_to_alpha_sigma(log_snr: float) -> SchedulePoint:
    """Schedule point with the given finite log-SNR: ``alpha**2 = sigmoid(log_snr)``."""
    log_snr = float(log_snr)
    if not math.isfinite(log_snr):
        raise ScheduleError(f"log-SNR must be finite, got {log_snr}")
    alpha = math.sqrt(_sigmoid(log_snr))
    sigma = math.sqrt(_sigmoid(-log_snr))
    phi = math.atan2(sigma, alpha)
    return SchedulePoint(t=phi / (0.5 * math.pi), alpha=alpha, sigma=sigma, phi=phi)


@dataclass(frozen=True)
class StepGrid:
    """Uniform sampler time grid: N+1 times descending from 1 to 0, step 1/N."""

    n_steps: int
    times: tuple[float, ...]

    def points(self) -> list[SchedulePoint]:
        return [alpha_sigma(t) for t in self.times]

    def halved(self) -> "StepGrid":
        """Grid with every other time point kept (N must be even)."""
        if self.n_steps % 2 != 0:
            raise ScheduleError(f"cannot halve a grid with odd n_steps={self.n_steps}")
        return make_grid(self.n_steps // 2)


def make_grid(n_steps: int) -> StepGrid:
    """Grid of times t_i = i/N for i = N, N-1, ..., 0."""
    n_steps = int(n_steps)
    if n_steps < 1:
        raise ScheduleError(f"n_steps must be >= 1, got {n_steps}")
    times = tuple((n_steps - j) / n_steps for j in range(n_steps + 1))
    return StepGrid(n_steps=n_steps, times=times)


def snr_ratio(pt_t: SchedulePoint, pt_s: SchedulePoint) -> float:
    """``exp(log_snr_t - log_snr_s)`` for s < t, with exact endpoint limits.

    At the zero-SNR endpoint (t=1) the ratio is exactly 0; likewise when
    s=0 (infinite SNR at s). Computed from alpha/sigma ratios rather than
    an exp/log round trip.
    """
    if pt_t.zero_snr or pt_s.sigma == 0.0:
        return 0.0
    if pt_s.zero_snr:
        raise ScheduleError("snr_ratio requires s < t; s is the zero-SNR endpoint")
    r = (pt_t.alpha * pt_s.sigma) / (pt_s.alpha * pt_t.sigma)
    return r * r


def half_snr_ratio(pt_t: SchedulePoint, pt_s: SchedulePoint) -> float:
    """``exp((log_snr_t - log_snr_s) / 2)`` with the same endpoint limits."""
    if pt_t.zero_snr or pt_s.sigma == 0.0:
        return 0.0
    if pt_s.zero_snr:
        raise ScheduleError("half_snr_ratio requires s < t; s is the zero-SNR endpoint")
    return (pt_t.alpha * pt_s.sigma) / (pt_s.alpha * pt_t.sigma)


def alphas_sigmas(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (alpha, sigma) with exact values at both endpoints."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ScheduleError("times must lie in [0, 1]")
    phi = 0.5 * np.pi * t
    alpha = np.cos(phi)
    sigma = np.sin(phi)
    alpha = np.where(t == 1.0, 0.0, np.where(t == 0.0, 1.0, alpha))
    sigma = np.where(t == 1.0, 1.0, np.where(t == 0.0, 0.0, sigma))
    return alpha, sigma


def log_snrs(t: np.ndarray) -> np.ndarray:
    """Vectorized log-SNR; IEEE +/-inf at the exact endpoints.

    This is the array fast path for training loops. Downstream consumers
    either clamp (network conditioning) or rely on ``exp(-inf) == 0``
    (loss-weight limits); the flagged scalar API is :func:`alpha_sigma`.
    """
    alpha, sigma = alphas_sigmas(t)
    with np.errstate(divide="ignore"):
        return 2.0 * np.log(np.divide(alpha, sigma, out=np.full_like(alpha, np.inf), where=sigma > 0.0))

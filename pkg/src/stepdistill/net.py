"""Small fully-connected denoising network with exact reverse-mode gradients.

The network maps (z, log_snr) -> raw output. The log-SNR is clamped to
[-LOG_SNR_CLAMP, LOG_SNR_CLAMP], scaled by 1/4 and expanded into a
sinusoidal feature vector that is concatenated to z at the input. All
parameters live in one flat float64 vector; gradients are computed by
hand-written backpropagation with a fixed summation order, so runs are
bit-reproducible.

The optimizer is Adam with bias correction, preceded by global-norm gradient
clipping and followed by decoupled weight decay (params *= 1 - lr*wd) and an
EMA shadow update (shadow = decay*shadow + (1-decay)*params).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .diffusion import Parameterization, Prediction, prediction_from_raw
from .schedule import LOG_SNR_CLAMP, SchedulePoint, alphas_sigmas, log_snrs

__all__ = [
    "MlpConfig",
    "Model",
    "ModelDenoiser",
    "OptState",
    "GradientError",
    "init_params",
    "forward",
    "value_and_grad",
    "clip_by_global_norm",
    "step",
    "anneal_lr",
    "init_opt_state",
]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-free on both tails
    e = np.exp(-np.abs(x))
    num = np.where(x >= 0.0, 1.0, e)
    num /= 1.0 + e
    return num


def _silu_fwd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = _sigmoid(a)
    return a * s, s


def _silu_bwd(a: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (1.0 + a * (1.0 - s))


def _relu_fwd(a: np.ndarray) -> tuple[np.ndarray, None]:
    return np.maximum(a, 0.0), None


def _relu_bwd(a: np.ndarray, _cache) -> np.ndarray:
    return (a > 0.0).astype(np.float64)


def _tanh_fwd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = np.tanh(a)
    return h, h


def _tanh_bwd(a: np.ndarray, h: np.ndarray) -> np.ndarray:
    return 1.0 - h * h


#: name -> (forward returning (value, cache), gradient from (preact, cache))
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "silu": (_silu_fwd, _silu_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
}


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of the denoising MLP."""

    input_dim: int
    hidden_dims: tuple[int, ...] = (128, 128, 128)
    output_channels: int = 1
    time_embed_dim: int = 16
    activation: str = "silu"

    def __post_init__(self):
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer dimensions must be >= 1")
        if self.output_channels not in (1, 2):
            raise ValueError(f"output_channels must be 1 or 2, got {self.output_channels}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be a positive even number")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def output_dim(self) -> int:
        return self.output_channels * self.input_dim

    def layer_sizes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per linear layer, including the time features."""
        dims = [self.input_dim + self.time_embed_dim, *self.hidden_dims, self.output_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_sizes())


def _param_slices(config: MlpConfig) -> list[tuple[slice, slice, int, int]]:
    out, offset = [], 0
    for fan_in, fan_out in config.layer_sizes():
        w = slice(offset, offset + fan_in * fan_out)
        offset += fan_in * fan_out
        b = slice(offset, offset + fan_out)
        offset += fan_out
        out.append((w, b, fan_in, fan_out))
    return out


def _unpack(flat: np.ndarray, config: MlpConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    return [
        (flat[w].reshape(fi, fo), flat[b])
        for w, b, fi, fo in _param_slices(config)
    ]


def init_params(config: MlpConfig, rng: np.random.Generator) -> np.ndarray:
    """He-style init for hidden layers; the final layer starts at zero so the
    initial prediction is degenerate but finite."""
    flat = np.zeros(config.n_params, dtype=np.float64)
    slices = _param_slices(config)
    for i, (w, _b, fan_in, fan_out) in enumerate(slices):
        if i == len(slices) - 1:
            continue
        scale = math.sqrt(2.0 / fan_in)
        flat[w] = (rng.standard_normal(fan_in * fan_out) * scale).astype(np.float64)
    return flat


@functools.lru_cache(maxsize=32)
def _embed_freqs_cached(half: int) -> np.ndarray:
    if half == 1:
        return np.ones(1)
    return np.geomspace(1.0, 16.0, half)


def _embed_freqs(config: MlpConfig) -> np.ndarray:
    return _embed_freqs_cached(config.time_embed_dim // 2)


def time_features(log_snr: np.ndarray, config: MlpConfig) -> np.ndarray:
    """Sinusoidal features of log_snr/4 after clamping to +/-LOG_SNR_CLAMP."""
    lam = np.clip(np.asarray(log_snr, dtype=np.float64), -LOG_SNR_CLAMP, LOG_SNR_CLAMP)
    angles = (lam[:, None] / 4.0) * _embed_freqs(config)[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def forward(flat: np.ndarray, config: MlpConfig, z: np.ndarray, log_snr: np.ndarray) -> np.ndarray:
    """Raw network output for a batch of (z, log_snr). Deterministic."""
    raw, _ = _forward_cached(flat, config, z, log_snr)
    return raw


def _forward_cached(flat, config, z, log_snr):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    log_snr = np.broadcast_to(np.asarray(log_snr, dtype=np.float64), (z.shape[0],))
    if z.shape[1] != config.input_dim:
        raise ValueError(f"expected input dim {config.input_dim}, got {z.shape[1]}")
    act_fwd, _ = ACTIVATIONS[config.activation]
    h = np.concatenate([z, time_features(log_snr, config)], axis=-1)
    layers = _unpack(flat, config)
    inputs, preacts, act_caches = [h], [], []
    for i, (w, b) in enumerate(layers):
        a = h @ w + b
        if i < len(layers) - 1:
            preacts.append(a)
            h, cache = act_fwd(a)
            act_caches.append(cache)
            inputs.append(h)
        else:
            h = a
    return h, (inputs, preacts, act_caches)


class GradientError(RuntimeError):
    """Raised when a loss or gradient is non-finite."""


def value_and_grad(
    flat: np.ndarray,
    config: MlpConfig,
    z: np.ndarray,
    log_snr: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
) -> tuple[float, np.ndarray]:
    """Loss and exact gradient of ``loss_fn`` applied to the network output.

    ``loss_fn`` maps the raw output (B, output_dim) to a scalar loss and the
    loss gradient with respect to the raw output. Parameter gradients are
    accumulated in a fixed order (one matmul per layer), so results are
    bit-reproducible for a given batch.
    """
    raw, (inputs, preacts, act_caches) = _forward_cached(flat, config, z, log_snr)
    loss, d_raw = loss_fn(raw)
    if not math.isfinite(loss):
        raise GradientError(f"non-finite loss {loss}")
    _, act_bwd = ACTIVATIONS[config.activation]
    grad = np.zeros_like(flat)
    layers = _unpack(flat, config)
    slices = _param_slices(config)
    delta = np.asarray(d_raw, dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        w_sl, b_sl, fi, fo = slices[i]
        grad[w_sl] = (inputs[i].T @ delta).reshape(fi * fo)
        grad[b_sl] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * act_bwd(preacts[i - 1], act_caches[i - 1])
    return loss, grad


@dataclass
class OptState:
    """Adam moments plus the EMA shadow and the clipping/decay settings."""

    m: np.ndarray
    v: np.ndarray
    ema: np.ndarray
    step: int = 0
    base_lr: float = 3e-4
    lr: float = 3e-4
    ema_decay: float = 0.9999
    clip_norm: float = 1.0
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_opt_state(
    params: np.ndarray,
    base_lr: float = 3e-4,
    ema_decay: float = 0.9999,
    clip_norm: float = 1.0,
    weight_decay: float = 0.001,
) -> OptState:
    return OptState(
        m=np.zeros_like(params),
        v=np.zeros_like(params),
        ema=np.array(params, copy=True),
        base_lr=base_lr,
        lr=base_lr,
        ema_decay=ema_decay,
        clip_norm=clip_norm,
        weight_decay=weight_decay,
    )


def clip_by_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.sum(grads * grads)))
    if math.isfinite(max_norm) and norm > max_norm:
        return grads * (max_norm / norm)
    return grads


def step(params: np.ndarray, grads: np.ndarray, opt: OptState) -> tuple[np.ndarray, OptState]:
    """One optimizer update, in place on ``params`` and ``opt``.

    Order: clip by global norm, Adam with bias correction, decoupled weight
    decay scaled by the current learning rate, EMA shadow update.
    """
    if not np.all(np.isfinite(grads)):
        raise GradientError("non-finite gradient")
    g = clip_by_global_norm(grads, opt.clip_norm)
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * (g * g)
    m_hat = opt.m / (1.0 - opt.beta1**opt.step)
    v_hat = opt.v / (1.0 - opt.beta2**opt.step)
    params -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    if opt.weight_decay != 0.0:
        params *= 1.0 - opt.lr * opt.weight_decay
    opt.ema = opt.ema_decay * opt.ema + (1.0 - opt.ema_decay) * params
    return params, opt


def anneal_lr(opt: OptState, fraction_done: float) -> OptState:
    """Linear anneal: lr = base_lr * (1 - fraction_done)."""
    if not 0.0 <= fraction_done <= 1.0:
        raise ValueError(f"fraction_done must lie in [0, 1], got {fraction_done}")
    opt.lr = opt.base_lr * (1.0 - fraction_done)
    return opt


@dataclass
class Model:
    """Denoising model: architecture, parameterization, and both weight sets."""

    config: MlpConfig
    parameterization: Parameterization
    params: np.ndarray
    ema_params: np.ndarray
    schedule: str = "cosine"

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        parameterization: Parameterization,
        rng: np.random.Generator,
        hidden_dims: tuple[int, ...] = (128, 128, 128),
        time_embed_dim: int = 16,
        activation: str = "silu",
    ) -> "Model":
        config = MlpConfig(
            input_dim=input_dim,
            hidden_dims=tuple(hidden_dims),
            output_channels=parameterization.output_channels,
            time_embed_dim=time_embed_dim,
            activation=activation,
        )
        params = init_params(config, rng)
        return cls(
            config=config,
            parameterization=parameterization,
            params=params,
            ema_params=np.array(params, copy=True),
        )

    def raw_forward(self, z: np.ndarray, log_snr: np.ndarray, use_ema: bool = False) -> np.ndarray:
        weights = self.ema_params if use_ema else self.params
        return forward(weights, self.config, z, log_snr)

    def predict(self, z: np.ndarray, t: np.ndarray, use_ema: bool = False) -> Prediction:
        """Prediction for a batch of latents at per-example times."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        lam = log_snrs(t)
        raw = self.raw_forward(z, lam, use_ema=use_ema)
        alpha, sigma = alphas_sigmas(t)
        return prediction_from_raw(raw, z, alpha[:, None], sigma[:, None], self.parameterization)

    def denoiser(self, use_ema: bool = True) -> "ModelDenoiser":
        return ModelDenoiser(model=self, use_ema=use_ema)

    def copy(self) -> "Model":
        return replace(
            self,
            params=np.array(self.params, copy=True),
            ema_params=np.array(self.ema_params, copy=True),
        )


@dataclass(frozen=True)
class ModelDenoiser:
    """Adapter with the sampler-facing signature (z, SchedulePoint) -> Prediction."""

    model: Model
    use_ema: bool = True

    def __call__(self, z: np.ndarray, pt: SchedulePoint) -> Prediction:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        lam = np.full(z.shape[0], pt.conditioning_log_snr)
        raw = self.model.raw_forward(z, lam, use_ema=self.use_ema)
        return prediction_from_raw(raw, z, pt.alpha, pt.sigma, self.model.parameterization)

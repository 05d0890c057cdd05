"""Toy datasets and sample-quality metrics.

The datasets are low-dimensional stand-ins for image benchmarks; the metrics
replace perceptual scores with distribution distances that need no
hyperparameters:

* energy distance: 2*E||a-b|| - E||a-a'|| - E||b-b'||, estimated with the
  V-statistic over all pairs (exactly zero for identical samples),
* 1-D Wasserstein-1: mean absolute difference of sorted samples,
* agreement: mean L2 between student N-step and teacher 2N-step DDIM samples
  generated from identical seed noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rngstream import stream
from .samplers import Denoiser, SamplerKind, SamplerSpec, sample_batch
from .schedule import make_grid

__all__ = [
    "ToyDataset",
    "MetricRow",
    "generate",
    "energy_distance",
    "wasserstein1",
    "agreement",
    "DATASET_KINDS",
]

DATASET_KINDS = ("gauss1d", "ring8", "swiss_roll", "checkerboard")


@dataclass(frozen=True)
class ToyDataset:
    """A samplable toy distribution.

    Parameters are per kind: gauss1d uses (mean, variance); ring8 places 8
    equal Gaussian modes of scale ``mode_std`` on a circle of ``radius``;
    swiss_roll adds isotropic ``noise``; checkerboard has no parameters.
    """

    kind: str
    mean: float = 0.0
    variance: float = 1.0
    radius: float = 2.0
    mode_std: float = 0.05
    noise: float = 0.1

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.variance <= 0 or self.radius <= 0 or self.mode_std <= 0 or self.noise < 0:
            raise ValueError("dataset scale parameters must be positive")

    @property
    def dim(self) -> int:
        return 1 if self.kind == "gauss1d" else 2

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        if self.kind == "gauss1d":
            return self.mean + np.sqrt(self.variance) * rng.standard_normal((count, 1))
        if self.kind == "ring8":
            angles = 2.0 * np.pi * rng.integers(0, 8, size=count) / 8.0
            centers = self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
            return centers + self.mode_std * rng.standard_normal((count, 2))
        if self.kind == "swiss_roll":
            a = 1.5 * np.pi * (1.0 + 2.0 * rng.random(count))
            pts = np.stack([a * np.cos(a), a * np.sin(a)], axis=-1) / 7.0
            return pts + self.noise * rng.standard_normal((count, 2))
        # checkerboard
        x1 = rng.random(count) * 4.0 - 2.0
        x2 = rng.random(count) - rng.integers(0, 2, size=count) * 2.0
        x2 = x2 + np.floor(x1) % 2.0
        return np.stack([x1, x2], axis=-1)


@dataclass(frozen=True)
class MetricRow:
    """One evaluation result for (sampler, step count)."""

    sampler: str
    n_steps: int
    energy_distance: float
    w1: float | None = None
    agreement: float | None = None


def generate(dataset: ToyDataset, count: int, seed: int) -> np.ndarray:
    """i.i.d. samples from the dataset's (seed, "data", kind) stream."""
    return dataset.sample(count, stream(seed, "data", dataset.kind))


def _mean_pairwise_distance(a: np.ndarray, b: np.ndarray, block: int = 1024) -> float:
    """Mean Euclidean distance over all |a| x |b| pairs.

    Uses the quadratic expansion ||a-b||^2 = ||a||^2 + ||b||^2 - 2 a.b (with a
    clamp against rounding below zero) and accumulates row blocks in a fixed
    order, so results are deterministic for given inputs."""
    a_sq = np.sum(a * a, axis=1)
    b_sq = np.sum(b * b, axis=1)
    bt = b.T
    total = 0.0
    for i in range(0, a.shape[0], block):
        g = a[i : i + block] @ bt
        g *= -2.0
        g += a_sq[i : i + block, None]
        g += b_sq[None, :]
        np.maximum(g, 0.0, out=g)
        np.sqrt(g, out=g)
        total += float(g.sum())
    return total / (a.shape[0] * b.shape[0])


def _subsample(x: np.ndarray, max_points: int, rng: np.random.Generator) -> np.ndarray:
    if x.shape[0] <= max_points:
        return x
    idx = rng.choice(x.shape[0], size=max_points, replace=False)
    return x[np.sort(idx)]


def energy_distance(
    a: np.ndarray, b: np.ndarray, *, max_points: int = 10_000, subsample_seed: int = 0
) -> float:
    """Energy distance between two sample sets (V-statistic, all pairs).

    Inputs larger than ``max_points`` are subsampled with a fixed-seed
    stream. The cross term is computed in a canonical argument order, so
    energy_distance(a, b) == energy_distance(b, a) bitwise.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("energy distance needs at least two points per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    a = _subsample(a, max_points, stream(subsample_seed, "ed-subsample", "a"))
    b = _subsample(b, max_points, stream(subsample_seed, "ed-subsample", "b"))
    if (a.shape[0], a.tobytes()) > (b.shape[0], b.tobytes()):
        a, b = b, a
    cross = _mean_pairwise_distance(a, b)
    within_a = _mean_pairwise_distance(a, a)
    within_b = _mean_pairwise_distance(b, b)
    return 2.0 * cross - within_a - within_b


def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """Exact empirical W1 for equal-size 1-D samples: mean |sorted - sorted|."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2 and a.shape[1] == 1:
        a = a[:, 0]
    if b.ndim == 2 and b.shape[1] == 1:
        b = b[:, 0]
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("wasserstein1 is defined for 1-D samples only")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"size mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def agreement(
    teacher: Denoiser,
    student: Denoiser,
    n_student: int,
    *,
    count: int,
    seed: int,
    dim: int,
) -> float:
    """Mean L2 distance between student N-step and teacher 2N-step DDIM
    samples started from the same seed noise."""
    if dim < 1 or count < 1 or n_student < 1:
        raise ValueError(f"need dim, count, n_student >= 1; got {dim}, {count}, {n_student}")
    spec = SamplerSpec(kind=SamplerKind.DDIM)
    student_final = sample_batch(student, spec, make_grid(n_student), seed=seed, count=count, dim=dim)
    teacher_final = sample_batch(teacher, spec, make_grid(2 * n_student), seed=seed, count=count, dim=dim)
    return float(np.mean(np.sqrt(np.sum((student_final - teacher_final) ** 2, axis=-1))))

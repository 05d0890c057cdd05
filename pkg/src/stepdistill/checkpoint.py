"""Versioned binary checkpoints with a JSON metadata sidecar.

Layout of the binary file (all integers little-endian):

    magic   4 bytes  b"SDCK"
    version u32
    hdrlen  u32
    header  hdrlen bytes of UTF-8 JSON: architecture, parameterization,
            schedule tag, optimizer step, array lengths
    arrays  float64 little-endian, in order: params, ema_params, opt_m, opt_v

Training metadata (seed, dataset, lineage, metrics) lives in a sidecar JSON
file at ``<path>.json`` so the binary payload stays byte-stable. Arrays are
written verbatim, so a load/save round trip is bitwise-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import Parameterization
from .net import Model, MlpConfig

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "checkpoint_hash"]

MAGIC = b"SDCK"
VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for malformed or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    """A model plus its optimizer moments and training metadata."""

    model: Model
    opt_m: np.ndarray
    opt_v: np.ndarray
    adam_step: int = 0
    metadata: dict = field(default_factory=dict)


def _header(ckpt: Checkpoint) -> dict:
    cfg = ckpt.model.config
    n = ckpt.model.params.size
    return {
        "config": {
            "input_dim": cfg.input_dim,
            "hidden_dims": list(cfg.hidden_dims),
            "output_channels": cfg.output_channels,
            "time_embed_dim": cfg.time_embed_dim,
            "activation": cfg.activation,
        },
        "parameterization": ckpt.model.parameterization.value,
        "schedule": ckpt.model.schedule,
        "adam_step": ckpt.adam_step,
        "sizes": {"params": n, "ema_params": n, "opt_m": n, "opt_v": n},
    }


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    """Write the binary checkpoint and its ``<path>.json`` sidecar."""
    path = Path(path)
    header = json.dumps(_header(ckpt), sort_keys=True).encode("utf-8")
    arrays = [ckpt.model.params, ckpt.model.ema_params, ckpt.opt_m, ckpt.opt_v]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = json.dumps(ckpt.metadata, sort_keys=True, indent=2) + "\n"
    Path(str(path) + ".json").write_text(sidecar)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, hdrlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(blob[12 : 12 + hdrlen].decode("utf-8"))
    cfg = MlpConfig(
        input_dim=header["config"]["input_dim"],
        hidden_dims=tuple(header["config"]["hidden_dims"]),
        output_channels=header["config"]["output_channels"],
        time_embed_dim=header["config"]["time_embed_dim"],
        activation=header["config"]["activation"],
    )
    sizes = header["sizes"]
    offset = 12 + hdrlen
    arrays = {}
    for name in ("params", "ema_params", "opt_m", "opt_v"):
        n = sizes[name]
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
    if arrays["params"].size != cfg.n_params:
        raise CheckpointError(
            f"{path}: parameter count {arrays['params'].size} does not match architecture "
            f"({cfg.n_params})"
        )
    model = Model(
        config=cfg,
        parameterization=Parameterization(header["parameterization"]),
        params=arrays["params"],
        ema_params=arrays["ema_params"],
        schedule=header["schedule"],
    )
    sidecar = Path(str(path) + ".json")
    metadata = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Checkpoint(
        model=model,
        opt_m=arrays["opt_m"],
        opt_v=arrays["opt_v"],
        adam_step=header["adam_step"],
        metadata=metadata,
    )


def checkpoint_hash(path: str | Path) -> str:
    """SHA-256 of the binary checkpoint payload."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

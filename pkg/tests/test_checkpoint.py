import numpy as np
import pytest

from stepdistill.checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)
from stepdistill.diffusion import Parameterization
from stepdistill.net import Model
from stepdistill.rngstream import stream


def make_checkpoint(seed=0) -> Checkpoint:
    model = Model.initialize(2, Parameterization.V, stream(seed, "ckpt"), hidden_dims=(8, 4))
    rng = stream(seed, "fill")
    model.params = rng.standard_normal(model.params.size)
    model.ema_params = rng.standard_normal(model.params.size)
    return Checkpoint(
        model=model,
        opt_m=rng.standard_normal(model.params.size),
        opt_v=np.abs(rng.standard_normal(model.params.size)),
        adam_step=1234,
        metadata={"seed": seed, "note": "fixture"},
    )


def test_round_trip_bitwise(tmp_path):
    ckpt = make_checkpoint()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    for a, b in (
        (ckpt.model.params, loaded.model.params),
        (ckpt.model.ema_params, loaded.model.ema_params),
        (ckpt.opt_m, loaded.opt_m),
        (ckpt.opt_v, loaded.opt_v),
    ):
        assert a.tobytes() == b.tobytes()
    assert loaded.adam_step == 1234
    assert loaded.model.config == ckpt.model.config
    assert loaded.model.parameterization is Parameterization.V
    assert loaded.model.schedule == "cosine"
    assert loaded.metadata == {"seed": 0, "note": "fixture"}


def test_save_is_deterministic(tmp_path):
    ckpt = make_checkpoint()
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    save_checkpoint(tmp_path / "b.ckpt", ckpt)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert checkpoint_hash(tmp_path / "a.ckpt") == checkpoint_hash(tmp_path / "b.ckpt")


def test_sidecar_written(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, make_checkpoint())
    sidecar = tmp_path / "model.ckpt.json"
    assert sidecar.exists()
    assert '"note": "fixture"' in sidecar.read_text()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, make_checkpoint())
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncated_arrays_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, make_checkpoint())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 256])
    with pytest.raises(Exception):
        load_checkpoint(path)


def test_missing_sidecar_gives_empty_metadata(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, make_checkpoint())
    (tmp_path / "model.ckpt.json").unlink()
    assert load_checkpoint(path).metadata == {}

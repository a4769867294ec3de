"""Binary checkpoint format: bit-exact round trips and corruption errors."""
import os

import numpy as np
import pytest

from img2latex.checkpoint import (CheckpointError, MAGIC, load_checkpoint,
                                  save_checkpoint)


def sample_params(dtype=np.float64):
    rng = np.random.default_rng(3)
    return {
        "dec.embed": rng.normal(size=(5, 3)).astype(dtype),
        "enc.conv1.w": rng.normal(size=(2, 1, 3, 3)).astype(dtype),
    }


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_roundtrip_is_bit_exact(tmp_path, dtype):
    path = str(tmp_path / "m.ckpt")
    params = sample_params(dtype)
    buffers = {"enc.bn1.running_mean": np.linspace(0, 1, 4)}
    opt = {"step_count": 7,
           "m": {k: np.full_like(a, 0.5) for k, a in params.items()},
           "v": {k: np.full_like(a, 2.0) for k, a in params.items()}}
    save_checkpoint(path, {"step": 7, "phase": "mle"}, params, buffers, opt)
    ckpt = load_checkpoint(path)
    assert ckpt.meta == {"step": 7, "phase": "mle"}
    for name, arr in params.items():
        assert ckpt.params[name].dtype == dtype
        assert np.array_equal(ckpt.params[name], arr)
    assert np.array_equal(ckpt.buffers["enc.bn1.running_mean"],
                          buffers["enc.bn1.running_mean"])
    assert ckpt.optimizer["step_count"] == 7
    assert np.array_equal(ckpt.optimizer["v"]["dec.embed"], opt["v"]["dec.embed"])


def test_no_optimizer_section_roundtrip(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, {"step": 0}, sample_params())
    ckpt = load_checkpoint(path)
    assert ckpt.optimizer is None
    assert ckpt.buffers == {}


def test_same_content_same_bytes(tmp_path):
    a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(a, {"step": 1}, sample_params())
    save_checkpoint(b, {"step": 1}, sample_params())
    assert open(a, "rb").read() == open(b, "rb").read()


def test_bad_magic_reports_offset(tmp_path):
    path = str(tmp_path / "m.ckpt")
    with open(path, "wb") as f:
        f.write(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncation_reports_byte_offset(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, {"step": 1}, sample_params())
    blob = open(path, "rb").read()
    cut = len(blob) // 2
    with open(path, "wb") as f:
        f.write(blob[:cut])
    with pytest.raises(CheckpointError, match="byte"):
        load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, {"step": 1}, sample_params())
    with open(path, "ab") as f:
        f.write(b"leftover")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_save_is_atomic_no_tmp_left_behind(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, {"step": 1}, sample_params())
    save_checkpoint(path, {"step": 2}, sample_params())
    assert load_checkpoint(path).meta["step"] == 2
    assert os.listdir(tmp_path) == ["m.ckpt"]


def test_magic_is_stable():
    # freezing the on-disk layout: the header is part of the contract
    assert MAGIC == b"I2LCKPT\x00"

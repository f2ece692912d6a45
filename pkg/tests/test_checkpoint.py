"""
Unit tests for the checkpoint module.
"""

# 3rd party
import numpy as np
import pytest
import testutils
from testutils import GRAD_CONFIG

# My stuff
import model
from checkpoint import MAGIC
from checkpoint import Checkpoint
from checkpoint import CheckpointError
from checkpoint import load_checkpoint
from utils import file_sha256


@pytest.fixture
def ckpt():
    return Checkpoint(GRAD_CONFIG, model.init_params(GRAD_CONFIG, seed=0), "ab" * 32, {"seed": 0, "kind": "teacher"})


def test_save_and_load_are_bit_identical(tmp_path, ckpt):
    path = str(tmp_path / "model.ckpt")
    digest = ckpt.save(path)
    assert digest == file_sha256(path)
    loaded = load_checkpoint(path)
    assert loaded.config == ckpt.config
    assert loaded.tokenizer_hash == ckpt.tokenizer_hash
    assert loaded.metadata == ckpt.metadata
    assert set(loaded.params) == set(ckpt.params)
    for name, value in ckpt.params.items():
        assert loaded.params[name].dtype == value.dtype
        assert loaded.params[name].tobytes() == value.tobytes()


def test_saving_twice_gives_the_same_file(tmp_path, ckpt):
    assert ckpt.save(str(tmp_path / "a.ckpt")) == ckpt.save(str(tmp_path / "b.ckpt"))


def test_float64_and_extra_tensors(tmp_path):
    params = testutils.random_params(GRAD_CONFIG)
    params["classifier.weight"] = np.arange(16, dtype=np.float64).reshape(8, 2)
    path = str(tmp_path / "head.ckpt")
    Checkpoint(GRAD_CONFIG, params, "00" * 32).save(path)
    loaded = Checkpoint.load(path)
    np.testing.assert_array_equal(loaded.params["classifier.weight"], params["classifier.weight"])
    np.testing.assert_array_equal(loaded.params["output"], params["output"])
    assert loaded.params["output"].dtype == np.float64


def test_header(ckpt):
    header = ckpt.header()
    assert header["format_version"] == 1
    assert header["model_config"] == GRAD_CONFIG.to_dict()
    first = sorted(ckpt.params)[0]
    assert header["tensors"][first]["offset"] == 0
    assert header["tensors"]["output"]["shape"] == [GRAD_CONFIG.d_model, GRAD_CONFIG.vocab_size]
    assert header["tensors"]["output"]["dtype"] == "<f4"


def test_save_checks_the_params(tmp_path, ckpt):
    del ckpt.params["norm"]
    with pytest.raises(model.ModelConfigError):
        ckpt.save(str(tmp_path / "broken.ckpt"))


def test_load_rejects_bad_files(tmp_path, ckpt):
    path = tmp_path / "model.ckpt"
    ckpt.save(str(path))
    raw = path.read_bytes()

    path.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.load(str(path))

    path.write_bytes(b"NOTACKPT" + raw[len(MAGIC) :])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        Checkpoint.load(str(path))

    path.write_bytes(MAGIC + b"\x01")
    with pytest.raises(CheckpointError):
        Checkpoint.load(str(path))

    with pytest.raises(CheckpointError):
        Checkpoint.load(str(tmp_path / "missing.ckpt"))


def test_unsupported_dtype(tmp_path):
    params = {name: value.astype(np.float16) for name, value in model.init_params(GRAD_CONFIG, seed=0).items()}
    with pytest.raises(CheckpointError):
        Checkpoint(GRAD_CONFIG, params, "").save(str(tmp_path / "half.ckpt"))

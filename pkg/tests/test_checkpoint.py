import numpy as np
import pytest

from se3gconv.checkpoint import (CheckpointCorruptError, CheckpointShapeError, CheckpointVersionError,
                                 checkpoint_bytes, load_checkpoint, save_checkpoint)
from se3gconv.model import VARIANTS, Model, ModelConfig


def tiny(variant="gcnn", **kw):
    kw.setdefault("channels", (2, 2, 3))
    kw.setdefault("resolution", 4)
    return Model(ModelConfig(variant, **kw))


@pytest.mark.parametrize("variant", VARIANTS)
def test_round_trip_reproduces_outputs_bitwise(variant, tmp_path):
    m = tiny(variant, seed=7)
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8, 8))
    m.forward(x, m.sample_grid(np.random.default_rng(1)) if m.cfg.is_group else None, training=True)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(m.forward(x), back.forward(x))
    assert checkpoint_bytes(back) == checkpoint_bytes(m)


def test_load_into_existing_model(tmp_path):
    src, dst = tiny(seed=1), tiny(seed=2)
    save_checkpoint(src, tmp_path / "m.ckpt")
    load_checkpoint(tmp_path / "m.ckpt", dst)
    for k, v in src.parameters().items():
        assert np.array_equal(v, dst.parameters()[k])


def test_shape_mismatch_names_the_tensor(tmp_path):
    save_checkpoint(tiny(channels=(2, 2, 3)), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointShapeError) as err:
        load_checkpoint(tmp_path / "m.ckpt", tiny(channels=(2, 2, 4)))
    assert err.value.kind == "shape"
    assert "tensor" in err.value.details or "missing" in err.value.details


def test_variant_mismatch(tmp_path):
    save_checkpoint(tiny("gcnn"), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "m.ckpt", tiny("cnn-big"))


def test_unknown_format_version(tmp_path):
    blob = checkpoint_bytes(tiny()).replace(b"format-version: 1", b"format-version: 9", 1)
    (tmp_path / "m.ckpt").write_bytes(blob)
    with pytest.raises(CheckpointVersionError) as err:
        load_checkpoint(tmp_path / "m.ckpt")
    assert err.value.details == {"found": 9, "expected": 1}


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic"])
def test_corruption_is_detected(damage, tmp_path):
    blob = bytearray(checkpoint_bytes(tiny()))
    if damage == "truncate":
        blob = blob[:-100]
    elif damage == "flip":
        blob[-5] ^= 0xFF
    else:
        blob[:5] = b"junk!"
    (tmp_path / "m.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "m.ckpt")

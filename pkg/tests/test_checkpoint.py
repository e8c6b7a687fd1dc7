import struct
import zlib

import numpy as np
import pytest

from derain_app.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from derain_app.config import MICRO, variant_config
from derain_app.errors import CheckpointError


def _resign(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_roundtrip_is_bitwise(tmp_path, random_micro_model):
    path = save_checkpoint(random_micro_model, tmp_path / "m.nledn")
    loaded, extra = load_checkpoint(path)
    assert extra == {}
    assert loaded.config == random_micro_model.config
    for (name, a), (name_b, b) in zip(random_micro_model.named_parameters(), loaded.named_parameters()):
        assert name == name_b
        assert a.numpy().tobytes() == b.numpy().tobytes()


@pytest.mark.parametrize("variant", ["Ra", "Re", "Rf"])
def test_config_block_roundtrip(variant):
    from derain_app.model import init_parameters

    cfg = variant_config(variant, MICRO)
    cfg.affinity_mode, cfg.upsample_mode, cfg.seed = "raw-sum", "bilinear", 2**63 + 5
    model, _ = decode(encode(init_parameters(cfg, seed=1)))
    assert model.config == cfg


def test_extra_entries_roundtrip(random_micro_model):
    extra = {"optim.m.exit.conv2.bias": np.array([0.5, -1.0, 2.0], dtype=np.float32)}
    _, back = decode(encode(random_micro_model, extra))
    np.testing.assert_array_equal(back["optim.m.exit.conv2.bias"], extra["optim.m.exit.conv2.bias"])


def test_header_layout(random_micro_model):
    buf = encode(random_micro_model)
    assert buf.startswith(MAGIC)
    assert struct.unpack("<H", buf[6:8])[0] == 1


def test_flipped_byte_fails_crc(random_micro_model):
    buf = bytearray(encode(random_micro_model))
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        decode(bytes(buf))


def test_bad_magic(random_micro_model):
    buf = b"NOTIT\0" + encode(random_micro_model)[6:]
    with pytest.raises(CheckpointError, match="magic"):
        decode(buf)


def test_unknown_version(random_micro_model):
    body = bytearray(encode(random_micro_model)[:-4])
    body[6:8] = struct.pack("<H", 9)
    with pytest.raises(CheckpointError, match="version 9"):
        decode(_resign(bytes(body)))


def test_truncated_payload(random_micro_model):
    body = encode(random_micro_model)[:-4]
    with pytest.raises(CheckpointError):
        decode(_resign(body[:-10]))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.nledn")


def test_atomic_write_leaves_only_target(tmp_path, random_micro_model):
    save_checkpoint(random_micro_model, tmp_path / "a.nledn")
    save_checkpoint(random_micro_model, tmp_path / "a.nledn")
    assert [p.name for p in tmp_path.iterdir()] == ["a.nledn"]


def test_load_in_float64(random_micro_model):
    model, _ = decode(encode(random_micro_model), dtype=np.float64)
    assert all(p.dtype == np.float64 for _, p in model.named_parameters())

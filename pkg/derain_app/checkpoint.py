"""Versioned binary checkpoints.

Layout (all little-endian):

    magic      b"NLEDN\\0"
    version    u16
    config     ModelConfig fields in declaration order (see _CONFIG_*)
    count      u32 number of tensor entries
    entries    u16 name length, UTF-8 name, u8 rank, rank x u32 extents, f32 payload
    crc32      u32 over every preceding byte

Optimizer moments are stored as extra entries under the "optim." prefix; the
scalars that must round-trip exactly (step, lr, EMA) go to a JSON sidecar
next to the checkpoint (see train.py).
"""

from __future__ import annotations

import io
import logging
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError, ConfigError
from .model import NledbnModel, parameter_layout
from .tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

MAGIC = b"NLEDN\0"
FORMAT_VERSION = 1

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_AFFINITY_CODES = {"softmax": 0, "raw-sum": 1}
_UPSAMPLE_CODES = {"indices": 0, "bilinear": 1}


def _pack_config(cfg: ModelConfig) -> bytes:
    out = io.BytesIO()
    for value in (cfg.base_channels, cfg.growth_rate, cfg.dense_layers_per_block):
        out.write(_U32.pack(value))
    for grids in (cfg.encoder_grids, cfg.decoder_grids):
        out.write(_U8.pack(len(grids)))
        for k in grids:
            out.write(_U32.pack(k))
    for flag in (cfg.nonlocal_enabled, cfg.dense_connections_enabled, cfg.pooling_enabled):
        out.write(_U8.pack(int(flag)))
    out.write(_U32.pack(cfg.num_blocks))
    out.write(_U8.pack(_AFFINITY_CODES[cfg.affinity_mode]))
    out.write(_U8.pack(_UPSAMPLE_CODES[cfg.upsample_mode]))
    out.write(_U64.pack(cfg.seed))
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, s: struct.Struct):
        return s.unpack(self.take(s.size))[0]


def _unpack_config(r: _Reader) -> ModelConfig:
    base, growth, layers = (r.unpack(_U32) for _ in range(3))
    grids = []
    for _ in range(2):
        n = r.unpack(_U8)
        grids.append([r.unpack(_U32) for _ in range(n)])
    nonlocal_, dense, pooling = (bool(r.unpack(_U8)) for _ in range(3))
    num_blocks = r.unpack(_U32)
    affinity = {v: k for k, v in _AFFINITY_CODES.items()}.get(r.unpack(_U8))
    upsample = {v: k for k, v in _UPSAMPLE_CODES.items()}.get(r.unpack(_U8))
    if affinity is None or upsample is None:
        raise CheckpointError("checkpoint config block has an unknown mode code")
    cfg = ModelConfig(
        base_channels=base,
        growth_rate=growth,
        dense_layers_per_block=layers,
        encoder_grids=grids[0],
        decoder_grids=grids[1],
        nonlocal_enabled=nonlocal_,
        dense_connections_enabled=dense,
        pooling_enabled=pooling,
        num_blocks=num_blocks,
        affinity_mode=affinity,
        upsample_mode=upsample,
        seed=r.unpack(_U64),
    )
    try:
        return cfg.validate()
    except ConfigError as e:
        raise CheckpointError(f"checkpoint config block is invalid: {e}") from e


def encode(model: NledbnModel, extra: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    entries = [(name, t.data) for name, t in model.named_parameters()]
    entries += list((extra or {}).items())
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_U16.pack(FORMAT_VERSION))
    out.write(_pack_config(model.config))
    out.write(_U32.pack(len(entries)))
    for name, arr in entries:
        raw_name = name.encode("utf-8")
        out.write(_U16.pack(len(raw_name)))
        out.write(raw_name)
        out.write(_U8.pack(arr.ndim))
        for extent in arr.shape:
            out.write(_U32.pack(extent))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = out.getvalue()
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes, dtype=None) -> Tuple[NledbnModel, Dict[str, np.ndarray]]:
    if len(buf) < len(MAGIC) + _U16.size + _U32.size or not buf.startswith(MAGIC):
        raise CheckpointError("not an NLEDN checkpoint (bad magic)")
    body, trailer = buf[:-_U32.size], buf[-_U32.size:]
    expected = _U32.unpack(trailer)[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if expected != actual:
        raise CheckpointError(f"checkpoint CRC mismatch: stored {expected:#010x}, computed {actual:#010x}")

    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.unpack(_U16)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    cfg = _unpack_config(r)
    dtype = np.dtype(dtype or get_default_dtype())

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(r.unpack(_U32)):
        name = r.take(r.unpack(_U16)).decode("utf-8")
        shape = tuple(r.unpack(_U32) for _ in range(r.unpack(_U8)))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last checkpoint entry")

    params: Dict[str, Tensor] = {}
    for name, shape in parameter_layout(cfg):
        arr = arrays.pop(name, None)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if arr.shape != shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, config implies {shape}")
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)
    return NledbnModel(config=cfg, params=params), arrays


def atomic_write(path: Path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over the destination."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(model: NledbnModel, path: str | Path, extra: Optional[Dict[str, np.ndarray]] = None) -> Path:
    path = Path(path)
    atomic_write(path, encode(model, extra))
    logger.debug("wrote checkpoint %s (%d parameters)", path, model.parameter_count())
    return path


def load_checkpoint(path: str | Path, dtype=None) -> Tuple[NledbnModel, Dict[str, np.ndarray]]:
    """Returns the model and any extra (non-parameter) entries such as optimizer moments."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    return decode(buf, dtype=dtype)

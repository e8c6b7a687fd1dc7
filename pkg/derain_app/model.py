"""NLEDN graph: entrance convs, NEDB encoder/decoder with pooling indices, tanh rain-map exit."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .config import ModelConfig
from .errors import ShapeError
from .ops import PoolIndices, max_pool2d
from .tensor import Tensor, as_tensor, get_default_dtype


# --- parameter layout ---

def _conv_shapes(name: str, c_in: int, c_out: int, k: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{name}.weight", (c_out, c_in, k, k)), (f"{name}.bias", (c_out,))]


def block_names(config: ModelConfig) -> List[str]:
    if config.pooling_enabled:
        return ["enc0", "enc1", "enc2", "dec0", "dec1", "dec2"]
    return [f"block{i}" for i in range(config.num_blocks)]


def _nedb_layout(prefix: str, config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    c, g, n_layers = config.base_channels, config.growth_rate, config.dense_layers_per_block
    e = config.embed_channels
    layout: List[Tuple[str, Tuple[int, ...]]] = []
    if config.nonlocal_enabled:
        for emb in ("theta", "phi", "g"):
            layout.append((f"{prefix}.nonlocal.{emb}", (e, c, 1, 1)))
        layout += _conv_shapes(f"{prefix}.nonlocal.restore", e, c, 1)
    for layer in range(n_layers):
        if config.dense_connections_enabled:
            c_in = c + layer * g
        else:
            c_in = c if layer == 0 else g
        layout += _conv_shapes(f"{prefix}.dense{layer}", c_in, g, 3)
    fusion_in = c + n_layers * g if config.dense_connections_enabled else g
    layout += _conv_shapes(f"{prefix}.fusion", fusion_in, c, 1)
    return layout


def parameter_layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter name and shape, in the fixed order used for init and checkpoints."""
    c = config.base_channels
    layout = _conv_shapes("entrance.h0", 3, c, 3) + _conv_shapes("entrance.h1", c, c, 3)
    for prefix in block_names(config):
        layout += _nedb_layout(prefix, config)
    layout += _conv_shapes("exit.conv1", c, c, 3) + _conv_shapes("exit.conv2", c, 3, 3)
    return layout


def count_parameters(config: ModelConfig) -> int:
    """Closed-form parameter count, derived independently of `parameter_layout`."""
    c, g, n_layers, e = config.base_channels, config.growth_rate, config.dense_layers_per_block, config.embed_channels

    def conv(c_in: int, c_out: int, k: int) -> int:
        return c_out * c_in * k * k + c_out

    entrance = conv(3, c, 3) + conv(c, c, 3)
    exit_ = conv(c, c, 3) + conv(c, 3, 3)
    nonlocal_ = 3 * e * c + conv(e, c, 1) if config.nonlocal_enabled else 0
    if config.dense_connections_enabled:
        # sum over layers of 9 * g * (c + l * g), plus biases, plus fusion over c + L * g channels
        dense = 9 * g * (n_layers * c + g * n_layers * (n_layers - 1) // 2) + n_layers * g
        fusion = conv(c + n_layers * g, c, 1)
    else:
        dense = conv(c, g, 3) + (n_layers - 1) * conv(g, g, 3)
        fusion = conv(g, c, 1)
    blocks = 6 if config.pooling_enabled else config.num_blocks
    return entrance + exit_ + blocks * (nonlocal_ + dense + fusion)


def parameter_groups(config: ModelConfig) -> Dict[str, int]:
    """Parameter totals per top-level group (entrance, each block, exit)."""
    groups: Dict[str, int] = {}
    for name, shape in parameter_layout(config):
        group = name.split(".")[0]
        groups[group] = groups.get(group, 0) + int(np.prod(shape))
    return groups


def _is_zero_init(name: str) -> bool:
    return name.endswith(".fusion.weight") or name == "exit.conv2.weight"


def _fan_in_bound(name: str, shape: Tuple[int, ...]) -> float:
    fan_in = int(np.prod(shape[1:]))
    # relu follows entrance and dense convs; the rest are linear
    followed_by_relu = name.startswith("entrance.") or ".dense" in name
    return float(np.sqrt((6.0 if followed_by_relu else 3.0) / fan_in))


# --- model ---

@dataclass
class NledbnModel:
    config: ModelConfig
    params: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def requires_grad_(self, flag: bool = True) -> "NledbnModel":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def conv(self, x: Tensor, name: str) -> Tensor:
        return ops.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def forward(self, image, clamp: bool = True) -> Tuple[Tensor, Tensor]:
        return forward(image, self, clamp=clamp)


def init_parameters(config: ModelConfig, seed: Optional[int] = None, dtype=None) -> NledbnModel:
    """Fan-in scaled uniform init; fusion and final exit convs start at zero.

    With zero fusion every NEDB is the identity and the rain map starts at 0, so
    a fresh model returns its input unchanged.
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = np.dtype(dtype or get_default_dtype())
    params: Dict[str, Tensor] = {}
    for name, shape in parameter_layout(config):
        if name.endswith(".bias") or _is_zero_init(name):
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = _fan_in_bound(name, shape)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return NledbnModel(config=config, params=params)


# --- regions ---

def _check_grid(op: str, shape: Tuple[int, ...], k: int) -> None:
    _, h, w = shape
    if k < 1 or h % k or w % k:
        raise ShapeError(op, f"H={h} and W={w} must be divisible by grid k={k}", shape)


def region_partition(f: Tensor, k: int) -> List[Tensor]:
    """Split a C x H x W map into k*k non-overlapping tiles in row-major order."""
    f = as_tensor(f)
    _check_grid("region_partition", f.shape, k)
    if k == 1:
        return [f]
    _, h, w = f.shape
    th, tw = h // k, w // k
    return [ops.crop(f, r * th, c * tw, th, tw) for r in range(k) for c in range(k)]


def region_merge(regions: List[Tensor], k: int) -> Tensor:
    return ops.tile(regions, k)


# --- blocks ---

def nedb_forward(f_in: Tensor, model: NledbnModel, prefix: str, k: int) -> Tensor:
    """Non-local enhancement on a k x k grid, dense 3x3 stack, 1x1 fusion, local residual."""
    cfg = model.config
    p = model.params
    d0 = f_in
    if cfg.nonlocal_enabled:
        _check_grid("nedb_forward", f_in.shape, k)
        enhanced = [
            ops.nonlocal_affinity_apply(
                region,
                p[f"{prefix}.nonlocal.theta"],
                p[f"{prefix}.nonlocal.phi"],
                p[f"{prefix}.nonlocal.g"],
                mode=cfg.affinity_mode,
            )
            for region in region_partition(f_in, k)
        ]
        y = region_merge(enhanced, k)
        d0 = ops.add(f_in, model.conv(y, f"{prefix}.nonlocal.restore"))

    features = [d0]
    prev = d0
    for layer in range(cfg.dense_layers_per_block):
        layer_in = ops.concat_channels(features) if cfg.dense_connections_enabled else prev
        prev = ops.relu(model.conv(layer_in, f"{prefix}.dense{layer}"))
        features.append(prev)
    fusion_in = ops.concat_channels(features) if cfg.dense_connections_enabled else prev
    return ops.add(f_in, model.conv(fusion_in, f"{prefix}.fusion"))


def _upsample(x: Tensor, indices: PoolIndices, mode: str) -> Tensor:
    if mode == "bilinear":
        return ops.upsample_bilinear2x(x)
    return ops.max_unpool2d(x, indices)


def forward(image, model: NledbnModel, clamp: bool = True) -> Tuple[Tensor, Tensor]:
    """Run NLEDN on one 3 x H x W image; returns (restored, rain_map).

    `clamp=False` keeps I_0 + R unclamped so the training loss still has gradients
    where the estimate leaves [0, 1].
    """
    cfg = model.config
    i0 = as_tensor(image)
    if i0.data.ndim != 3 or i0.shape[0] != 3:
        raise ShapeError("forward", "expected a 3 x H x W image", i0.shape)
    _, h, w = i0.shape
    if h % 8 or w % 8:
        raise ShapeError("forward", f"H={h} and W={w} must be multiples of 8; pad the image first", i0.shape)

    f0 = ops.relu(model.conv(i0, "entrance.h0"))
    f1 = ops.relu(model.conv(f0, "entrance.h1"))
    grids = cfg.grids_for_blocks()

    if cfg.pooling_enabled:
        x = f1
        skips: List[Tensor] = []
        pools: List[PoolIndices] = []
        for stage in range(3):
            x = nedb_forward(x, model, f"enc{stage}", grids[stage])
            skips.append(x)
            x, idx = max_pool2d(x)
            pools.append(idx)
        for stage in range(3):
            x = nedb_forward(x, model, f"dec{stage}", grids[3 + stage])
            # decoder stage s reuses the indices of encoder pool 3 - s
            x = _upsample(x, pools[2 - stage], cfg.upsample_mode)
            skip = f1 if stage == 2 else skips[2 - stage]
            x = ops.add(x, skip)
    else:
        x = f1
        for i, prefix in enumerate(block_names(cfg)):
            x = nedb_forward(x, model, prefix, grids[i])

    x = ops.add(model.conv(x, "exit.conv1"), f0)
    rain = ops.tanh(model.conv(x, "exit.conv2"))
    restored = ops.add(i0, rain)
    if clamp:
        restored = ops.clamp(restored, 0.0, 1.0)
    return restored, rain

from dataclasses import replace

import numpy as np
import pytest

import derain_app.model as model_mod
from derain_app import ops
from derain_app.config import MICRO, SMALL, VARIANTS, ModelConfig, variant_config
from derain_app.errors import ConfigError, ShapeError
from derain_app.model import (
    count_parameters,
    forward,
    init_parameters,
    nedb_forward,
    parameter_groups,
    parameter_layout,
    region_merge,
    region_partition,
)
from derain_app.ops import PoolIndices
from derain_app.tensor import GradTape, Tensor
from derain_app.train import mae_loss


def _layout_total(cfg):
    return sum(int(np.prod(shape)) for _, shape in parameter_layout(cfg))


def test_micro_parameter_count_by_hand():
    # entrance 112 + 148, exit 148 + 111, six blocks of (non-local 36 + dense 184 + fusion 36)
    assert count_parameters(MICRO) == 2055
    assert init_parameters(MICRO).parameter_count() == 2055


@pytest.mark.parametrize("name", sorted(VARIANTS))
@pytest.mark.parametrize("base", [MICRO, SMALL, ModelConfig()], ids=["micro", "small", "default"])
def test_closed_form_count_matches_layout(name, base):
    cfg = variant_config(name, base)
    assert count_parameters(cfg) == _layout_total(cfg)


def test_groups_add_up():
    groups = parameter_groups(MICRO)
    assert set(groups) == {"entrance", "enc0", "enc1", "enc2", "dec0", "dec1", "dec2", "exit"}
    assert sum(groups.values()) == count_parameters(MICRO)


def test_fusion_channel_bookkeeping():
    cfg = ModelConfig(base_channels=8, growth_rate=4, dense_layers_per_block=4)
    shapes = dict(parameter_layout(cfg))
    assert shapes["enc0.fusion.weight"] == (8, 24, 1, 1)
    assert shapes["enc0.dense3.weight"] == (4, 20, 3, 3)
    assert shapes["enc0.nonlocal.theta"] == (4, 8, 1, 1)


def test_non_dense_layers_chain():
    cfg = variant_config("Ra", SMALL)
    shapes = dict(parameter_layout(cfg))
    assert shapes["block0.dense0.weight"] == (4, 8, 3, 3)
    assert shapes["block0.dense1.weight"] == (4, 4, 3, 3)
    assert shapes["block0.fusion.weight"] == (8, 4, 1, 1)


def test_ablation_counts_increase_a_b_c():
    counts = [count_parameters(variant_config(v, MICRO)) for v in ("Ra", "Rb", "Rc")]
    assert counts[0] < counts[1] < counts[2]


def test_variant_names_accept_underscore():
    assert variant_config("R_f", MICRO) == variant_config("Rf", MICRO)
    with pytest.raises(ConfigError):
        variant_config("Rz")


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_every_variant_runs_forward_and_backward(name, rng):
    model = init_parameters(variant_config(name, MICRO))
    image = rng.uniform(0, 1, (3, 64, 64)).astype(np.float32)
    with GradTape() as tape:
        restored, rain = forward(image, model, clamp=False)
        loss = mae_loss(restored, np.clip(image - 0.1, 0, 1))
    grads = tape.backward(loss)
    assert restored.shape == rain.shape == (3, 64, 64)
    assert all(p.id in grads for _, p in model.named_parameters())


@pytest.mark.parametrize("h", [16, 32, 64])
@pytest.mark.parametrize("w", [16, 32, 64])
def test_shape_preserved(h, w, random_micro_model, rng):
    restored, rain = forward(rng.uniform(0, 1, (3, h, w)).astype(np.float32), random_micro_model)
    assert restored.shape == (3, h, w)
    assert np.all(np.abs(rain.numpy()) <= 1.0)
    assert np.all((restored.numpy() >= 0) & (restored.numpy() <= 1))


def test_fresh_model_is_identity(rng):
    model = init_parameters(MICRO)
    for _ in range(10):
        image = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
        restored, rain = forward(image, model)
        np.testing.assert_array_equal(restored.numpy(), image)
        assert not rain.numpy().any()


def test_zero_fusion_block_is_identity(rng):
    model = init_parameters(MICRO)
    f = Tensor(rng.uniform(-1, 1, (4, 16, 16)).astype(np.float32))
    out = nedb_forward(f, model, "enc0", 8)
    np.testing.assert_array_equal(out.numpy(), f.numpy())


def test_nedb_rejects_indivisible_grid(rng):
    model = init_parameters(MICRO)
    with pytest.raises(ShapeError, match="k=8"):
        nedb_forward(Tensor(np.zeros((4, 12, 16), dtype=np.float32)), model, "enc0", 8)


def test_forward_requires_multiple_of_eight(random_micro_model):
    with pytest.raises(ShapeError, match="multiples of 8"):
        forward(np.zeros((3, 20, 16), dtype=np.float32), random_micro_model)


def test_same_seed_same_parameters():
    a, b = init_parameters(MICRO, seed=3), init_parameters(MICRO, seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert pa.numpy().tobytes() == pb.numpy().tobytes()
    c = init_parameters(MICRO, seed=4)
    assert a["entrance.h0.weight"].numpy().tobytes() != c["entrance.h0.weight"].numpy().tobytes()


def test_init_scale_and_zero_layers():
    model = init_parameters(SMALL)
    bound = np.sqrt(6.0 / 27)
    assert np.abs(model["entrance.h0.weight"].numpy()).max() <= bound * (1 + 1e-6)
    assert not model["enc0.fusion.weight"].numpy().any()
    assert not model["exit.conv2.weight"].numpy().any()
    assert not model["exit.conv1.bias"].numpy().any()


def test_forward_is_deterministic(random_micro_model, rng):
    image = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
    a, _ = forward(image, random_micro_model)
    b, _ = forward(image, random_micro_model)
    assert a.numpy().tobytes() == b.numpy().tobytes()


def test_scrambled_pool_indices_change_output(random_micro_model, rng, monkeypatch):
    image = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
    reference, _ = forward(image, random_micro_model, clamp=False)

    def scrambled_pool(x):
        out, idx = ops.max_pool2d(x)
        w = idx.input_shape[2]
        rows, cols = np.divmod(idx.indices, w)
        # move every index to the diagonal cell of its own 2x2 window
        moved = (rows ^ 1) * w + (cols ^ 1)
        return out, PoolIndices(moved, idx.input_shape)

    monkeypatch.setattr(model_mod, "max_pool2d", scrambled_pool)
    scrambled, _ = forward(image, random_micro_model, clamp=False)
    assert not np.array_equal(reference.numpy(), scrambled.numpy())


def test_bilinear_decoder_ignores_indices(random_micro_model, rng, monkeypatch):
    model = random_micro_model
    model.config = replace(model.config, upsample_mode="bilinear")
    image = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
    reference, _ = forward(image, model)

    def scrambled_pool(x):
        out, idx = ops.max_pool2d(x)
        return out, PoolIndices(np.zeros_like(idx.indices), idx.input_shape)

    monkeypatch.setattr(model_mod, "max_pool2d", scrambled_pool)
    again, _ = forward(image, model)
    np.testing.assert_array_equal(reference.numpy(), again.numpy())


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_partition_merge_roundtrip(k, rng):
    f = Tensor(rng.uniform(size=(3, 16, 16)))
    regions = region_partition(f, k)
    assert len(regions) == k * k
    assert region_merge(regions, k).numpy().tobytes() == f.numpy().tobytes()


def test_partition_top_left_tile(rng):
    f = rng.uniform(size=(2, 4, 4))
    regions = region_partition(f, 2)
    np.testing.assert_array_equal(regions[0].numpy(), f[:, 0:2, 0:2])
    np.testing.assert_array_equal(regions[1].numpy(), f[:, 0:2, 2:4])


def test_partition_single_region_is_input(rng):
    f = Tensor(rng.uniform(size=(2, 4, 4)))
    assert region_partition(f, 1) == [f]


def test_flat_variant_cycles_grids():
    cfg = variant_config("Re", MICRO)
    assert cfg.grids_for_blocks() == [8, 4, 2, 1, 2, 4]
    assert replace(cfg, num_blocks=8).grids_for_blocks()[6:] == [8, 4]


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(encoder_grids=[8, 4]).validate()
    with pytest.raises(ConfigError):
        ModelConfig(decoder_grids=[1, 3, 4]).validate()
    with pytest.raises(ConfigError):
        ModelConfig(affinity_mode="cosine").validate()

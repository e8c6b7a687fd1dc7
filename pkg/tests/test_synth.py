import numpy as np
import pytest

from derain_app.data import load_image, to_uint8
from derain_app.errors import DatasetError
from derain_app.synth import (
    RainParams,
    SynthOptions,
    make_scene,
    rain_layer,
    synth_rain,
    item_seed,
    synthesize_and_save,
    write_scenes,
)


@pytest.fixture
def clean(rng):
    return rng.uniform(0.1, 0.4, (3, 32, 32)).astype(np.float32)


def test_no_streaks_means_no_rain(clean):
    pair = synth_rain(clean, RainParams(streak_count=0))
    np.testing.assert_array_equal(pair.rainy, pair.clean)


def test_zero_intensity_means_no_rain(clean):
    pair = synth_rain(clean, RainParams(intensity=(0.0, 0.0)))
    np.testing.assert_array_equal(pair.rainy, clean)


def test_layer_is_non_negative_and_bounded():
    layer, angle = rain_layer(48, 40, RainParams(seed=3))
    assert layer.min() >= 0.0 and layer.max() <= 0.6
    assert layer.any()
    assert 60.0 <= angle <= 120.0


def test_rain_only_brightens(clean):
    pair = synth_rain(clean, RainParams(seed=5))
    assert np.all(pair.rainy >= pair.clean)
    assert np.all(pair.rainy <= 1.0)


def test_same_seed_same_rain(clean):
    a = synth_rain(clean, RainParams(seed=9)).rainy
    b = synth_rain(clean, RainParams(seed=9)).rainy
    c = synth_rain(clean, RainParams(seed=10)).rainy
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_vertical_streaks_run_along_columns():
    params = RainParams(streak_count=1, angle=(90.0, 90.0), length=(20.0, 20.0), width=(0.5, 0.5),
                        intensity=(0.5, 0.5), seed=1)
    layer, _ = rain_layer(64, 64, params)
    rows, cols = np.nonzero(layer > 0.25)
    assert np.ptp(rows) > np.ptp(cols)


@pytest.mark.parametrize("kwargs", [
    dict(streak_count=-1),
    dict(angle=(120.0, 60.0)),
    dict(width=(0.0, 1.0)),
    dict(intensity=(0.2, 0.9)),
    dict(length=(-1.0, 4.0)),
])
def test_invalid_params(kwargs):
    with pytest.raises(ValueError):
        RainParams(**kwargs).validate()


def test_make_scene_range(rng):
    scene = make_scene(24, 40, rng)
    assert scene.shape == (3, 24, 40) and scene.dtype == np.float32
    assert scene.min() >= 0.0 and scene.max() <= 1.0


def test_synthesize_layout_and_manifest(tmp_path, png_corpus):
    out = tmp_path / "data"
    written = synthesize_and_save(SynthOptions(png_corpus, out, count=4, seed=2))
    assert [p.name for p in written] == ["00000.png", "00001.png", "00002.png", "00003.png"]
    assert sorted(p.name for p in (out / "clean").iterdir()) == [p.name for p in written]
    # sources cycle in sorted order
    np.testing.assert_array_equal(load_image(out / "clean" / "00003.png"), load_image(png_corpus / "img0.png"))
    lines = (out / "manifest.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "id\tseed\tstreak_count\tangle"
    assert len(lines) == 5 and lines[1].startswith("00000\t")


def test_synthesize_is_reproducible(tmp_path, png_corpus):
    a = synthesize_and_save(SynthOptions(png_corpus, tmp_path / "a", count=3, seed=11))
    b = synthesize_and_save(SynthOptions(png_corpus, tmp_path / "b", count=3, seed=11))
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()


def test_synthesized_files_match_synth_rain(tmp_path, png_corpus):
    out = tmp_path / "data"
    synthesize_and_save(SynthOptions(png_corpus, out, count=2, seed=4))
    for i, src in enumerate(sorted(png_corpus.glob("*.png"))[:2]):
        pair = synth_rain(load_image(src), RainParams(seed=item_seed(4, i)))
        saved = load_image(out / "rainy" / f"{i:05d}.png")
        np.testing.assert_array_equal(to_uint8(saved), to_uint8(pair.rainy))


def test_synthesize_needs_sources(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError):
        synthesize_and_save(SynthOptions(tmp_path / "empty", tmp_path / "out"))


def test_write_scenes(tmp_path):
    paths = write_scenes(tmp_path / "scenes", count=2, size=24, seed=0)
    assert [p.name for p in paths] == ["scene_0000.png", "scene_0001.png"]
    assert load_image(paths[0]).shape == (3, 24, 24)

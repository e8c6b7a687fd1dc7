import logging

import numpy as np
import pytest
from PIL import Image

from conftest import write_png
from derain_app.checkpoint import save_checkpoint
from derain_app.config import MICRO
from derain_app.model import init_parameters
from main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, cli


def _synth(tmp_path, name, *extra):
    out = tmp_path / name
    argv = ["synth", "--clean-dir", str(tmp_path / "scenes"), "--out-dir", str(out),
            "--count", "3", "--scenes", "2", "--scene-size", "32", "--seed", "5", *extra]
    assert cli(argv) == EXIT_OK
    return out


def test_missing_required_flag_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli(["synth", "--out-dir", str(tmp_path)])
    assert err.value.code == EXIT_USAGE


def test_bad_rain_range_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli(["synth", "--clean-dir", str(tmp_path), "--out-dir", str(tmp_path), "--intensity", "0.1", "0.9"])
    assert err.value.code == EXIT_USAGE
    assert not any(tmp_path.iterdir())


def test_synth_is_byte_reproducible(tmp_path):
    a = _synth(tmp_path, "a")
    b = _synth(tmp_path, "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) == 7
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_synth_without_intensity_copies_clean(tmp_path):
    out = _synth(tmp_path, "dry", "--intensity", "0", "0")
    for rainy in (out / "rainy").iterdir():
        clean = out / "clean" / rainy.name
        np.testing.assert_array_equal(np.asarray(Image.open(rainy)), np.asarray(Image.open(clean)))


def test_train_zero_steps(tmp_path, capsys):
    data = _synth(tmp_path, "data")
    run = tmp_path / "run"
    code = cli(["train", "--data", str(data), "--out", str(run), "--max-steps", "0", "--preset", "micro"])
    assert code == EXIT_OK
    assert sorted(p.name for p in run.iterdir()) == [
        "config.txt", "step_000000.nledn", "step_000000.state.json", "train_log.tsv",
    ]
    assert "base_channels = 4" in (run / "config.txt").read_text()
    assert "step 0" in capsys.readouterr().out


def test_train_patience_one_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--patience", "1"])
    assert err.value.code == EXIT_USAGE


def test_train_bad_lr_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--lr", "0"])
    assert err.value.code == EXIT_USAGE


def test_describe_counts_agree(capsys):
    assert cli(["describe", "--preset", "micro"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "parameters: 2055" in out
    assert "closed-form: 2055" in out


def test_describe_variant(capsys):
    assert cli(["describe", "--preset", "small", "--variant", "Ra"]) == EXIT_OK
    out = capsys.readouterr().out
    built = next(line for line in out.splitlines() if line.startswith("parameters:"))
    closed = next(line for line in out.splitlines() if line.startswith("closed-form:"))
    assert built.split(":")[1] == closed.split(":")[1]
    assert "pooling_enabled = false" in out


def test_infer_with_fresh_model_returns_the_input(tmp_path, rng):
    ckpt = save_checkpoint(init_parameters(MICRO), tmp_path / "fresh.nledn")
    pixels = rng.integers(0, 256, (20, 13, 3)).astype(np.uint8)
    write_png(tmp_path / "in" / "odd.png", pixels)
    code = cli(["infer", "--ckpt", str(ckpt), "--in", str(tmp_path / "in"), "--out", str(tmp_path / "out"),
                "--dump-rainmap", str(tmp_path / "rain")])
    assert code == EXIT_OK
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "out" / "odd.png")), pixels)
    rain = np.asarray(Image.open(tmp_path / "rain" / "odd.png"))
    assert rain.shape == (20, 13, 3)
    assert np.all(rain == 128)


def test_infer_with_corrupt_checkpoint_fails(tmp_path, caplog):
    ckpt = save_checkpoint(init_parameters(MICRO), tmp_path / "m.nledn")
    raw = bytearray(ckpt.read_bytes())
    raw[40] ^= 0x01
    ckpt.write_bytes(bytes(raw))
    write_png(tmp_path / "in" / "a.png", np.zeros((8, 8, 3)))
    with caplog.at_level(logging.ERROR):
        code = cli(["infer", "--ckpt", str(ckpt), "--in", str(tmp_path / "in"), "--out", str(tmp_path / "out")])
    assert code == EXIT_FAILURE
    assert "CRC" in caplog.text
    assert not (tmp_path / "out").exists()


def test_eval_ground_truth_against_itself(tmp_path, capsys):
    data = _synth(tmp_path, "data")
    report = tmp_path / "report.tsv"
    code = cli(["eval", "--gt-dir", str(data / "clean"), "--pred-dir", str(data / "clean"), "--out", str(report)])
    assert code == EXIT_OK
    lines = report.read_text().splitlines()
    assert lines[-1] == "MEAN\tinf\t1.000000"
    assert len(lines) == 5


def test_eval_needs_one_source(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli(["eval", "--gt-dir", str(tmp_path)])
    assert err.value.code == EXIT_USAGE


def test_gradcheck_selected_kernels(capsys):
    assert cli(["gradcheck", "--check", "relu", "--check", "conv2d"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "all gradient checks passed" in out
    assert "conv2d" in out


def test_eval_runs_a_checkpoint(tmp_path, capsys):
    data = _synth(tmp_path, "data", "--intensity", "0", "0")
    ckpt = save_checkpoint(init_parameters(MICRO), tmp_path / "fresh.nledn")
    code = cli(["eval", "--gt-dir", str(data / "clean"), "--ckpt", str(ckpt), "--rainy-dir", str(data / "rainy")])
    assert code == EXIT_OK
    assert capsys.readouterr().out.splitlines()[-1] == "MEAN\tinf\t1.000000"


def test_eval_lists_unpaired_ids(tmp_path, caplog):
    data = _synth(tmp_path, "data")
    (data / "rainy" / "00001.png").unlink()
    with caplog.at_level(logging.ERROR):
        code = cli(["eval", "--gt-dir", str(data / "clean"), "--pred-dir", str(data / "rainy")])
    assert code == EXIT_FAILURE
    assert "00001" in caplog.text

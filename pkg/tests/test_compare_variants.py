import pytest

from eval.compare_variants import compare, synthetic_pairs
from derain_app.config import MICRO, variant_config
from derain_app.model import count_parameters


def test_synthetic_pairs_are_rainy():
    ds = synthetic_pairs(count=2, size=16, seed=1)
    assert ds.ids == ["00000", "00001"]
    assert all((p.rainy >= p.clean).all() for p in ds.pairs)


def test_compare_reports_every_variant():
    res = compare(["Ra", "Rf"], steps=2, pairs=1, size=16, preset="micro", seed=0)
    rows = res["results"]
    assert [r["variant"] for r in rows] == ["Ra", "Rf"]
    assert rows[1]["params"] == count_parameters(variant_config("Rf", MICRO))
    assert rows[0]["params"] < rows[1]["params"]
    assert all(r["final_loss"] is not None for r in rows)


@pytest.mark.slow
def test_micro_model_overfits_four_pairs_and_full_variant_wins():
    res = compare(["Ra", "Rf"], steps=5000, pairs=4, size=64, preset="micro", seed=0)
    ra, rf = res["results"]
    assert rf["final_loss"] < 0.02
    assert rf["psnr_db"] > 30.0
    assert rf["psnr_db"] - ra["psnr_db"] >= 0.5

from __future__ import annotations

import argparse
import json
import tempfile
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List

# Ensure project root is on sys.path when invoked as a script (eval/compare_variants.py)
import sys as _sys
from pathlib import Path as _P
_ROOT = _P(__file__).resolve().parents[1]
if str(_ROOT) not in _sys.path:
    _sys.path.insert(0, str(_ROOT))

import numpy as np

from derain_app.config import MICRO, SMALL, TrainConfig, VARIANTS, variant_config
from derain_app.data import InMemoryDataset
from derain_app.metrics import EvalReport, evaluate_pair
from derain_app.model import init_parameters
from derain_app.pipeline import DerainPipeline
from derain_app.synth import RainParams, make_scene, synth_rain
from derain_app.train import train_loop


def synthetic_pairs(count: int, size: int, seed: int) -> InMemoryDataset:
    pairs = []
    for i in range(count):
        clean = make_scene(size, size, np.random.default_rng([seed, 7, i]))
        pairs.append(synth_rain(clean, RainParams(streak_count=40, seed=seed * 1000 + i), pair_id=f"{i:05d}"))
    return InMemoryDataset(pairs)


def compare(variants: List[str], steps: int, pairs: int, size: int, preset: str, seed: int) -> Dict[str, Any]:
    base = replace(MICRO if preset == "micro" else SMALL, seed=seed)
    dataset = synthetic_pairs(pairs, size, seed)
    train_cfg = TrainConfig(max_steps=steps, checkpoint_every=max(1, steps), log_every=max(1, steps // 10), seed=seed)

    out: List[Dict[str, Any]] = []
    for name in variants:
        model = init_parameters(variant_config(name, base))

        # Train in a scratch folder; only the in-memory model is kept
        with tempfile.TemporaryDirectory() as tmp:
            t0 = time.time()
            result = train_loop(model, dataset, replace(train_cfg), Path(tmp))
            train_time = time.time() - t0

        pipe = DerainPipeline(model)
        report = EvalReport([evaluate_pair(p.id, pipe.derain(p.rainy)[0], p.clean) for p in dataset.pairs])
        baseline = EvalReport([evaluate_pair(p.id, p.rainy, p.clean) for p in dataset.pairs])

        out.append({
            "variant": name,
            "params": model.parameter_count(),
            "final_loss": round(result.final_loss, 5) if result.final_loss is not None else None,
            "psnr_db": round(report.mean_psnr, 3),
            "ssim": round(report.mean_ssim, 4),
            "rainy_psnr_db": round(baseline.mean_psnr, 3),
            "train_time_s": round(train_time, 1),
        })

    return {"steps": steps, "pairs": pairs, "size": size, "preset": preset, "results": out}


def main():
    p = argparse.ArgumentParser(description="Train ablation variants on the same synthetic pairs and compare PSNR/SSIM")
    p.add_argument("--variants", default=",".join(VARIANTS), help="Comma separated, e.g. Ra,Rf")
    p.add_argument("--steps", type=int, default=500, help="Optimizer steps per variant")
    p.add_argument("--pairs", type=int, default=4, help="Number of synthetic training pairs")
    p.add_argument("--size", type=int, default=64, help="Side length of the synthetic images")
    p.add_argument("--preset", choices=["micro", "small"], default="micro")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="Optional path to save JSON results")
    args = p.parse_args()

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    res = compare(variants, args.steps, args.pairs, args.size, args.preset, args.seed)
    rows = res["results"]

    # Pretty print summary
    print("\nvariant | params | final_loss | psnr_db | ssim   | rainy_psnr | train_s")
    for r in rows:
        print(
            f"{r['variant']:7} | {r['params']:6} | {r['final_loss']!s:10} | {r['psnr_db']:7} | "
            f"{r['ssim']:6} | {r['rainy_psnr_db']:10} | {r['train_time_s']:7}"
        )

    if args.out:
        Path(args.out).write_text(json.dumps(res, indent=2), encoding="utf-8")
        print(f"\nSaved results to {args.out}")


if __name__ == "__main__":
    main()

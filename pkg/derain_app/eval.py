from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .data import list_pngs, load_image
from .errors import DatasetError
from .metrics import EvalReport, EvalRow, evaluate_pair
from .pipeline import DerainPipeline

logger = logging.getLogger(__name__)


def _by_id(folder: Path) -> Dict[str, Path]:
    return {p.stem: p for p in list_pngs(folder)}


def _pair_up(gt_dir: Path, other_dir: Path) -> List[tuple]:
    gt, other = _by_id(gt_dir), _by_id(other_dir)
    unpaired = sorted(set(gt) ^ set(other))
    if unpaired:
        raise DatasetError(f"unpaired files between {other_dir} and {gt_dir}", unpaired)
    if not gt:
        raise DatasetError(f"no PNG images under {gt_dir}")
    return [(pid, other[pid], gt[pid]) for pid in sorted(gt)]


def run_eval(
    gt_dir: str | Path,
    pred_dir: Optional[str | Path] = None,
    ckpt: Optional[str | Path] = None,
    rainy_dir: Optional[str | Path] = None,
    threads: int = 1,
) -> EvalReport:
    """Score restored images against ground truth on luminance PSNR / SSIM.

    Either `pred_dir` holds finished predictions, or `ckpt` + `rainy_dir` are
    given and each rainy image is de-rained in memory first. Files pair up by
    name; any id present on only one side is an error.
    """
    if (pred_dir is None) == (ckpt is None):
        raise ValueError("pass exactly one of pred_dir or ckpt")
    if ckpt is not None and rainy_dir is None:
        raise ValueError("evaluating a checkpoint needs rainy_dir")

    gt_dir = Path(gt_dir)
    if ckpt is not None:
        # one inference thread per eval worker; no nested pools
        pipe = DerainPipeline.from_checkpoint(ckpt, threads=1)
        pairs = _pair_up(gt_dir, Path(rainy_dir))

        def restore(path: Path) -> np.ndarray:
            return pipe.derain(load_image(path))[0]
    else:
        pairs = _pair_up(gt_dir, Path(pred_dir))
        restore = load_image

    def score(item) -> EvalRow:
        pid, src, gt = item
        return evaluate_pair(pid, restore(src), load_image(gt))

    t0 = time.time()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(score, pairs))
    else:
        rows = [score(item) for item in pairs]

    report = EvalReport(rows)
    logger.info("evaluated %d image(s) in %.2fs", len(rows), time.time() - t0)
    return report

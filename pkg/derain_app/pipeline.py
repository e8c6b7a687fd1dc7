# derain_app/pipeline.py
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .checkpoint import load_checkpoint
from .data import crop_pad, list_pngs, load_image, pad_amounts, reflect_pad, save_image
from .errors import DatasetError
from .model import NledbnModel, forward

logger = logging.getLogger(__name__)


def rainmap_to_image(rain: np.ndarray) -> np.ndarray:
    """R in (-1, 1) -> (R + 1) / 2 so it can be stored as a PNG."""
    return (rain + 1.0) / 2.0


class DerainPipeline:
    def __init__(self, model: NledbnModel, threads: int = 1):
        self.model = model
        self.threads = max(1, threads)

    @classmethod
    def from_checkpoint(cls, path: str | Path, threads: int = 1) -> "DerainPipeline":
        model, _ = load_checkpoint(path)
        logger.info("loaded %s (%d parameters)", path, model.parameter_count())
        return cls(model, threads=threads)

    # --- single image ---
    def derain(self, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Pad to a multiple of 8, run the network, crop back; returns (restored, rain map)."""
        _, h, w = image.shape
        pad = pad_amounts(h, w)
        padded = reflect_pad(image, pad)
        restored, rain = forward(padded, self.model, clamp=True)
        return crop_pad(restored.numpy(), pad), crop_pad(rain.numpy(), pad)

    def derain_file(self, src: Path, out_dir: Path, rainmap_dir: Optional[Path] = None) -> Path:
        restored, rain = self.derain(load_image(src))
        out = save_image(restored, Path(out_dir) / src.name)
        if rainmap_dir is not None:
            save_image(rainmap_to_image(rain), Path(rainmap_dir) / src.name)
        return out

    # --- batch ---
    def run(self, src: str | Path, out_dir: str | Path, rainmap_dir: Optional[str | Path] = None) -> List[Path]:
        """De-rain one PNG or every PNG in a directory; outputs keep the input file names."""
        src = Path(src)
        inputs = [src] if src.is_file() else list_pngs(src)
        if not inputs:
            raise DatasetError(f"no PNG images under {src}")
        out_dir = Path(out_dir)
        rain_dir = Path(rainmap_dir) if rainmap_dir is not None else None

        if self.threads == 1:
            return [self.derain_file(p, out_dir, rain_dir) for p in inputs]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(lambda p: self.derain_file(p, out_dir, rain_dir), inputs))

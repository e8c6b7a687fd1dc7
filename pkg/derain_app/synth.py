from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .data import ImagePair, list_pngs, load_image, save_image
from .errors import DatasetError

logger = logging.getLogger(__name__)

Range = Tuple[float, float]


@dataclass
class RainParams:
    streak_count: int = 120
    # degrees from horizontal; 90 is vertical rain
    angle: Range = (60.0, 120.0)
    length: Range = (8.0, 24.0)
    # Gaussian cross-profile sigma, px
    width: Range = (0.5, 1.2)
    intensity: Range = (0.2, 0.6)
    seed: int = 0

    def validate(self) -> "RainParams":
        if self.streak_count < 0:
            raise ValueError("streak_count must be >= 0")
        for name in ("angle", "length", "width", "intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: ({lo}, {hi})")
        if self.length[0] < 0 or self.width[0] <= 0:
            raise ValueError("length must be >= 0 and width > 0")
        if self.intensity[0] < 0.0 or self.intensity[1] > 0.6:
            raise ValueError("intensity must lie in [0, 0.6]")
        return self


def _stamp(layer: np.ndarray, cx: float, cy: float, angle_deg: float, length: float, sigma: float, amp: float) -> None:
    """Max-composite one anti-aliased segment with a Gaussian cross-profile into `layer`."""
    h, w = layer.shape
    theta = np.deg2rad(angle_deg)
    # image rows grow downwards
    ux, uy = np.cos(theta), -np.sin(theta)
    half = length / 2.0
    reach = half + 3.0 * sigma + 1.0
    x0, x1 = int(max(0, np.floor(cx - reach))), int(min(w, np.ceil(cx + reach) + 1))
    y0, y1 = int(max(0, np.floor(cy - reach))), int(min(h, np.ceil(cy + reach) + 1))
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    profile = np.exp(-(across**2) / (2.0 * sigma**2))
    # linear one-pixel falloff at both ends
    ends = np.clip(half + 0.5 - np.abs(along), 0.0, 1.0)
    patch = amp * profile * ends
    np.maximum(layer[y0:y1, x0:x1], patch, out=layer[y0:y1, x0:x1])


def rain_layer(height: int, width: int, params: RainParams) -> Tuple[np.ndarray, float]:
    """Single-channel streak layer S >= 0 and the dominant angle used for it."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    angle = float(rng.uniform(*params.angle))
    layer = np.zeros((height, width), dtype=np.float32)
    for _ in range(params.streak_count):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        length = rng.uniform(*params.length)
        sigma = rng.uniform(*params.width)
        amp = rng.uniform(*params.intensity)
        # small per-streak jitter around the image's rain direction
        jitter = rng.normal(0.0, 2.0)
        if amp > 0:
            _stamp(layer, cx, cy, angle + jitter, length, sigma, amp)
    return layer, angle


def composite(clean: np.ndarray, layer: np.ndarray) -> np.ndarray:
    """rainy = clamp(clean + S, 0, 1) with the streak layer broadcast over RGB."""
    if not layer.any():
        return clean.copy()
    return np.clip(clean + layer[None, :, :], 0.0, 1.0).astype(clean.dtype)


def synth_rain_with_angle(clean: np.ndarray, params: RainParams, pair_id: str = "synthetic") -> Tuple[ImagePair, float]:
    _, h, w = clean.shape
    layer, angle = rain_layer(h, w, params)
    return ImagePair(rainy=composite(clean, layer), clean=clean, id=pair_id), angle


def synth_rain(clean: np.ndarray, params: RainParams, pair_id: str = "synthetic") -> ImagePair:
    return synth_rain_with_angle(clean, params, pair_id)[0]


def make_scene(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural clean image: smooth colour gradient plus a few flat rectangles and discs."""
    ys, xs = np.mgrid[0:height, 0:width]
    u, v = xs / max(1, width - 1), ys / max(1, height - 1)
    base = rng.uniform(0.15, 0.75, size=(3, 1, 1))
    tilt = rng.uniform(-0.25, 0.25, size=(3, 2))
    img = base + tilt[:, 0, None, None] * u + tilt[:, 1, None, None] * v
    for _ in range(int(rng.integers(2, 6))):
        colour = rng.uniform(0.0, 0.9, size=(3, 1))
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, height), rng.integers(0, width)
            y1 = min(height, y0 + int(rng.integers(height // 8 + 1, height // 2 + 2)))
            x1 = min(width, x0 + int(rng.integers(width // 8 + 1, width // 2 + 2)))
            mask = (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
        else:
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            r = rng.uniform(min(height, width) / 10, min(height, width) / 3)
            mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= r**2
        img[:, mask] = colour
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_scenes(out_dir: Path, count: int, size: int, seed: int) -> List[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, 7, i])
        paths.append(save_image(make_scene(size, size, rng), out_dir / f"scene_{i:04d}.png"))
    return paths


@dataclass
class SynthOptions:
    clean_dir: Path
    out_dir: Path
    count: int = 16
    seed: int = 0
    rain: RainParams = field(default_factory=RainParams)


def item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def synthesize_and_save(opts: SynthOptions) -> List[Path]:
    """Write `<out>/rainy/<id>.png`, `<out>/clean/<id>.png` and `<out>/manifest.tsv`.

    Clean sources are cycled in sorted order; each item gets its own seed derived
    from (seed, index), so the same flags always reproduce the same bytes.
    Returns the list of written rainy image paths.
    """
    sources = list_pngs(Path(opts.clean_dir))
    if not sources:
        raise DatasetError(f"no PNG images under {opts.clean_dir}")
    out = Path(opts.out_dir)
    (out / "rainy").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(parents=True, exist_ok=True)

    written: List[Path] = []
    rows = []
    for i in range(opts.count):
        src = sources[i % len(sources)]
        clean = load_image(src)
        params = RainParams(**{**opts.rain.__dict__, "seed": item_seed(opts.seed, i)})
        pair_id = f"{i:05d}"
        pair, angle = synth_rain_with_angle(clean, params, pair_id)
        save_image(clean, out / "clean" / f"{pair_id}.png")
        written.append(save_image(pair.rainy, out / "rainy" / f"{pair_id}.png"))
        rows.append((pair_id, params.seed, params.streak_count, f"{angle:.3f}"))
        logger.debug("synthesized %s from %s", pair_id, src.name)

    with (out / "manifest.tsv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(("id", "seed", "streak_count", "angle"))
        writer.writerows(rows)
    return written

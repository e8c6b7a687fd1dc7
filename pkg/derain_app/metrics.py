"""Full-reference quality metrics on the luminance channel."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from .data import Pad, crop_pad
from .errors import ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

# ITU-R BT.601, full range
Y_WEIGHTS = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def rgb_to_y(image) -> np.ndarray:
    """3 x H x W RGB in [0, 1] -> 1 x H x W luminance."""
    rgb = _array(image)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError("rgb_to_y", "expected a 3 x H x W image", rgb.shape)
    return np.tensordot(Y_WEIGHTS, rgb, axes=(0, 0))[None]


def _pair(op: str, a, b):
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ShapeError(op, "inputs differ in shape", a.shape, b.shape)
    return a, b


def psnr(a, b) -> float:
    """10 * log10(1 / MSE) in dB; identical inputs give +inf."""
    a, b = _pair("psnr", a, b)
    if np.array_equal(a, b):
        return math.inf
    return float(peak_signal_noise_ratio(a, b, data_range=1.0))


def ssim(a, b) -> float:
    """Single-scale SSIM averaged over every valid window position (L = 1)."""
    a, b = _pair("ssim", a, b)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ShapeError("ssim", "expected a single-channel map", a.shape)
        a, b = a[0], b[0]
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError("ssim", f"image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.shape)

    return float(
        structural_similarity(
            a,
            b,
            win_size=SSIM_WINDOW,
            data_range=1.0,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
        )
    )


# --- reports ---

@dataclass
class EvalRow:
    id: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    def _finite_psnr(self) -> Tuple[float, int]:
        finite = [r.psnr for r in self.rows if math.isfinite(r.psnr)]
        excluded = len(self.rows) - len(finite)
        if not finite:
            return (math.inf if self.rows else math.nan), excluded
        return float(np.mean(finite)), excluded

    @property
    def mean_psnr(self) -> float:
        """Mean over finite rows; identical pairs (+inf) are left out."""
        return self._finite_psnr()[0]

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def to_tsv(self) -> str:
        lines = ["id\tpsnr_db\tssim"]
        lines += [f"{r.id}\t{_fmt(r.psnr)}\t{r.ssim:.6f}" for r in self.rows]
        mean_psnr, excluded = self._finite_psnr()
        if excluded:
            logger.warning("excluding %d identical pair(s) with infinite PSNR from the mean", excluded)
        lines.append(f"MEAN\t{_fmt(mean_psnr)}\t{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"images": len(self.rows), "psnr_db": self.mean_psnr, "ssim": self.mean_ssim}


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def evaluate_pair(pair_id: str, restored, clean, pad: Optional[Pad] = None) -> EvalRow:
    """Crop padding, clamp to [0, 1], and score on luminance."""
    restored, clean = _array(restored), _array(clean)
    if pad is not None and any(pad):
        restored, clean = crop_pad(restored, pad), crop_pad(clean, pad)
    y_r = rgb_to_y(np.clip(restored, 0.0, 1.0))
    y_c = rgb_to_y(np.clip(clean, 0.0, 1.0))
    return EvalRow(pair_id, psnr(y_r, y_c), ssim(y_r, y_c))

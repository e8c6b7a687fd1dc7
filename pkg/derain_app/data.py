# derain_app/data.py
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError, ImageLoadError
from .ops import bilinear_matrix

logger = logging.getLogger(__name__)

MAX_SIDE = 512
MULTIPLE = 8

Pad = Tuple[int, int, int, int]  # top, bottom, left, right


_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _png_bit_depth(p: Path) -> int:
    # IHDR is always the first chunk: signature(8) length(4) type(4) w(4) h(4) depth(1)
    with p.open("rb") as fh:
        head = fh.read(25)
    if len(head) < 25 or not head.startswith(_PNG_SIGNATURE) or head[12:16] != b"IHDR":
        raise ImageLoadError(p, "not a PNG file")
    return head[24]


def load_image(path: str | Path) -> np.ndarray:
    """8-bit RGB PNG -> float32 array of shape 3 x H x W in [0, 1]."""
    p = Path(path)
    if not p.is_file():
        raise ImageLoadError(p, "file not found")
    depth = _png_bit_depth(p)
    if depth != 8:
        raise ImageLoadError(p, f"unsupported bit depth {depth}; only 8-bit RGB is accepted")
    try:
        with Image.open(p) as img:
            if img.format != "PNG":
                raise ImageLoadError(p, f"expected a PNG, got {img.format}")
            if img.mode != "RGB":
                raise ImageLoadError(p, f"expected an RGB image, got mode {img.mode}")
            arr = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise ImageLoadError(p, "not a readable image") from e
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)).copy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """3 x H x W floats -> H x W x 3 bytes: clamp, scale by 255, round half up."""
    scaled = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_image(image: np.ndarray, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(to_uint8(image))).save(p, format="PNG")
    return p


@dataclass
class ImagePair:
    rainy: np.ndarray
    clean: np.ndarray
    id: str
    pad: Pad = (0, 0, 0, 0)

    def __post_init__(self):
        if self.rainy.shape != self.clean.shape:
            raise DatasetError(f"pair {self.id}: rainy {self.rainy.shape} and clean {self.clean.shape} differ")


# --- geometry ---

def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    _, h, w = image.shape
    if (h, w) == (height, width):
        return image
    mh = bilinear_matrix(h, height)
    mw = bilinear_matrix(w, width)
    out = np.einsum("ih,chw,jw->cij", mh, image.astype(np.float64), mw)
    return out.astype(image.dtype)


def fit_long_side(height: int, width: int, max_side: int = MAX_SIDE) -> Tuple[int, int]:
    """Target size with the long side at most `max_side` (aspect kept, rounded)."""
    long_side = max(height, width)
    if long_side <= max_side:
        return height, width
    s = max_side / long_side
    return max(1, int(round(height * s))), max(1, int(round(width * s)))


def pad_amounts(height: int, width: int, multiple: int = MULTIPLE) -> Pad:
    """Split padding symmetrically; the odd pixel goes to the bottom / right."""
    dh, dw = -height % multiple, -width % multiple
    return dh // 2, dh - dh // 2, dw // 2, dw - dw // 2


def reflect_pad(image: np.ndarray, pad: Pad) -> np.ndarray:
    top, bottom, left, right = pad
    if not any(pad):
        return image
    _, h, w = image.shape
    # reflect needs the pad to be smaller than the extent
    mode = "reflect" if max(top, bottom) < h and max(left, right) < w else "symmetric"
    return np.pad(image, ((0, 0), (top, bottom), (left, right)), mode=mode)


def crop_pad(image: np.ndarray, pad: Pad) -> np.ndarray:
    top, bottom, left, right = pad
    _, h, w = image.shape
    return image[:, top:h - bottom, left:w - right]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def prepare(pair: ImagePair, train_mode: bool, rng: Optional[np.random.Generator] = None) -> ImagePair:
    """Resize (long side <= 512), reflect-pad to a multiple of 8, and flip in train mode."""
    rainy, clean = pair.rainy, pair.clean
    _, h, w = rainy.shape
    th, tw = fit_long_side(h, w)
    if (th, tw) != (h, w):
        rainy, clean = resize_bilinear(rainy, th, tw), resize_bilinear(clean, th, tw)
    pad = pad_amounts(th, tw)
    rainy, clean = reflect_pad(rainy, pad), reflect_pad(clean, pad)
    if train_mode:
        rng = rng or np.random.default_rng()
        # one draw decides both images
        if rng.random() < 0.5:
            rainy, clean = hflip(rainy), hflip(clean)
            pad = (pad[0], pad[1], pad[3], pad[2])
    total = tuple(a + b for a, b in zip(pair.pad, pad))
    return replace(pair, rainy=rainy, clean=clean, pad=total)


# --- datasets on disk ---

def list_pngs(folder: Path) -> List[Path]:
    return sorted(p for p in Path(folder).glob("*.png") if p.is_file())


class PairedDataset:
    """`<root>/rainy/<id>.png` paired with `<root>/clean/<id>.png` by file name."""

    def __init__(self, root: str | Path, rainy_dir: str = "rainy", clean_dir: str = "clean"):
        self.root = Path(root)
        rainy = {p.stem: p for p in list_pngs(self.root / rainy_dir)}
        clean = {p.stem: p for p in list_pngs(self.root / clean_dir)}
        unpaired = sorted(set(rainy) ^ set(clean))
        if unpaired:
            raise DatasetError(f"unpaired files under {self.root}", unpaired)
        if not rainy:
            raise DatasetError(f"no image pairs found under {self.root}")
        self.ids = sorted(rainy)
        self._rainy, self._clean = rainy, clean
        logger.debug("found %d pairs under %s", len(self.ids), self.root)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> ImagePair:
        pair_id = self.ids[index]
        return ImagePair(load_image(self._rainy[pair_id]), load_image(self._clean[pair_id]), pair_id)


class InMemoryDataset:
    def __init__(self, pairs: List[ImagePair]):
        if not pairs:
            raise DatasetError("dataset is empty")
        self.pairs = list(pairs)
        self.ids = [p.id for p in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> ImagePair:
        return self.pairs[index]


def step_order(n: int, seed: int, step: int) -> int:
    """Dataset index used at a global step: a fresh seeded permutation per epoch."""
    epoch, pos = divmod(step, n)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return int(perm[pos])


def step_rng(seed: int, step: int) -> np.random.Generator:
    # Stateless per step, so a resumed run draws the same flips.
    return np.random.default_rng([seed, 1_000_003, step])


def training_sample(dataset, seed: int, step: int) -> ImagePair:
    pair = dataset[step_order(len(dataset), seed, step)]
    return prepare(pair, train_mode=True, rng=step_rng(seed, step))


class Prefetcher:
    """One producer thread preparing samples for steps [start, stop) into a bounded queue."""

    _DONE = object()

    def __init__(self, produce: Callable[[int], ImagePair], start: int, stop: int, capacity: int = 4):
        self._produce = produce
        self._queue: "queue.Queue" = queue.Queue(maxsize=capacity)
        self._stop_event = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(start, stop), name="nledn-prefetch", daemon=True)
        self._thread.start()

    def _run(self, start: int, stop: int) -> None:
        try:
            for step in range(start, stop):
                if self._stop_event.is_set():
                    return
                self._put((step, self._produce(step)))
        except BaseException as e:  # surfaced on the consumer side
            self._put(e)
            return
        self._put(self._DONE)

    def _put(self, item) -> None:
        while not self._stop_event.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[Tuple[int, ImagePair]]:
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def close(self) -> None:
        self._stop_event.set()
        self._thread.join(timeout=5)

"""Central finite-difference checks for every differentiable kernel and the whole network.

All checks run in float64. Kernel checks score every input coordinate on its own:

    max_i |a_i - n_i| / max(|a_i|, |n_i|, COORD_FLOOR * max_j max(|a_j|, |n_j|))

so a small coordinate with a wrong gradient fails even when the large ones are
right. The end-to-end check samples parameter coordinates through thousands of
relu and max kinks and stays norm-relative:

    max |analytic - numeric| / max(max |analytic|, max |numeric|)
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import ops
from .config import MICRO, SMALL, ModelConfig
from .model import _fan_in_bound, forward, init_parameters
from .tensor import GradTape, Tensor, precision
from .train import mae_loss

logger = logging.getLogger(__name__)

STEP = 1e-4
# the network has thousands of relu / max kinks; a smaller step keeps them out of the stencil
NETWORK_STEP = 1e-5
KERNEL_TOL = 1e-4
NETWORK_TOL = 1e-3
SAMPLED_PARAMS = 32
# per-coordinate denominators never drop below this fraction of the largest gradient
COORD_FLOOR = 1e-2

SCALES: Dict[str, ModelConfig] = {"micro": MICRO, "small": SMALL}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    coordinates: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


@dataclass
class GradcheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]

    def to_table(self) -> str:
        lines = ["check\tworst_rel_err\ttolerance\tcoords\tstatus"]
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            lines.append(f"{r.name}\t{r.max_rel_error:.3e}\t{r.tolerance:.0e}\t{r.coordinates}\t{status}")
        return "\n".join(lines) + "\n"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def coordinate_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = COORD_FLOOR) -> float:
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    scale = magnitude.max(initial=0.0)
    diff = np.abs(analytic - numeric)
    if scale == 0.0:
        return float(diff.max(initial=0.0))
    return float((diff / np.maximum(magnitude, floor * scale)).max())


def check_function(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    tolerance: float = KERNEL_TOL,
    step: float = STEP,
) -> CheckResult:
    """Compare tape gradients of sum(w * fn(*inputs)) against central differences.

    `w` is a fixed random weighting so every output element contributes with a
    distinct coefficient. Every coordinate of every input is perturbed.
    """
    t0 = time.perf_counter()
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with precision(np.float64):
        sample_out = fn(*(Tensor(a) for a in arrays))
        weights = np.asarray(rng.uniform(-1.0, 1.0, size=sample_out.shape))

        def loss_value() -> float:
            return ops.weighted_sum(fn(*(Tensor(a) for a in arrays)), weights).item()

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with GradTape() as tape:
            loss = ops.weighted_sum(fn(*leaves), weights)
        grads = tape.backward(loss)

        analytic, numeric = [], []
        for arr, leaf in zip(arrays, leaves):
            g = grads.get(leaf.id, np.zeros_like(arr))
            flat = arr.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                plus = loss_value()
                flat[j] = orig - step
                minus = loss_value()
                flat[j] = orig
                numeric.append((plus - minus) / (2.0 * step))
                analytic.append(g.reshape(-1)[j])
    err = coordinate_error(np.array(analytic), np.array(numeric))
    return CheckResult(name, err, tolerance, len(numeric), time.perf_counter() - t0)


# --- kernel checks ---

def _away_from(x: np.ndarray, points: Iterable[float], margin: float = 0.05) -> np.ndarray:
    """Nudge entries closer than `margin` to any kink point out of the stencil's reach."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.where(x[near] >= p, margin, -margin)
    return x


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    # a shuffled grid keeps every pair of entries well separated, so argmax never flips
    n = int(np.prod(shape))
    return (rng.permutation(n) / n * 2.0 - 1.0).reshape(shape)


def _conv(rng):
    x, w, b = rng.uniform(-1, 1, (2, 5, 5)), rng.uniform(-1, 1, (3, 2, 3, 3)), rng.uniform(-1, 1, 3)
    return check_function("conv2d", ops.conv2d, [x, w, b], rng)


def _pool(rng):
    return check_function("max_pool2d", lambda x: ops.max_pool2d(x)[0], [_distinct(rng, (2, 4, 4))], rng)


def _unpool(rng):
    _, idx = ops.max_pool2d(Tensor(_distinct(rng, (2, 4, 4))))
    y = rng.uniform(-1, 1, (2, 2, 2))
    return check_function("max_unpool2d", lambda t: ops.max_unpool2d(t, idx), [y], rng)


def _bilinear(rng):
    return check_function("upsample_bilinear2x", ops.upsample_bilinear2x, [rng.uniform(-1, 1, (2, 3, 4))], rng)


def _nonlocal_softmax(rng):
    f = rng.uniform(-1, 1, (3, 2, 3))
    wt, wp, wg = (rng.uniform(-1, 1, (2, 3, 1, 1)) for _ in range(3))
    fn = lambda *a: ops.nonlocal_affinity_apply(*a, mode="softmax")  # noqa: E731
    return check_function("nonlocal_softmax", fn, [f, wt, wp, wg], rng)


def _nonlocal_raw_sum(rng):
    # positive features and embeddings keep every row sum far from the epsilon guard
    f = rng.uniform(0.2, 1, (3, 2, 3))
    wt, wp, wg = (rng.uniform(0.2, 1, (2, 3, 1, 1)) for _ in range(3))
    fn = lambda *a: ops.nonlocal_affinity_apply(*a, mode="raw-sum")  # noqa: E731
    return check_function("nonlocal_raw_sum", fn, [f, wt, wp, wg], rng)


def _concat(rng):
    fn = lambda a, b, c: ops.concat_channels([a, b, c])  # noqa: E731
    shapes = [(1, 3, 2), (2, 3, 2), (1, 3, 2)]
    return check_function("concat_channels", fn, [rng.uniform(-1, 1, s) for s in shapes], rng)


def _crop(rng):
    fn = lambda x: ops.crop(x, 1, 2, 2, 3)  # noqa: E731
    return check_function("crop", fn, [rng.uniform(-1, 1, (2, 4, 5))], rng)


def _tile(rng):
    fn = lambda *t: ops.tile(t, 2)  # noqa: E731
    return check_function("tile", fn, [rng.uniform(-1, 1, (2, 2, 3)) for _ in range(4)], rng)


def _relu(rng):
    return check_function("relu", ops.relu, [_away_from(rng.uniform(-1, 1, (3, 4, 4)), [0.0])], rng)


def _tanh(rng):
    return check_function("tanh", ops.tanh, [rng.uniform(-1, 1, (2, 3, 3))], rng)


def _add(rng):
    a, b = rng.uniform(-1, 1, (2, 3, 3)), rng.uniform(-1, 1, (2, 3, 3))
    return check_function("add", ops.add, [a, b], rng)


def _scale(rng):
    return check_function("scale", lambda x: ops.scale(x, -1.7), [rng.uniform(-1, 1, (2, 3, 3))], rng)


def _clamp(rng):
    x = _away_from(rng.uniform(-0.5, 1.5, (2, 4, 4)), [0.0, 1.0])
    return check_function("clamp", ops.clamp, [x], rng)


def _mae(rng):
    target = rng.uniform(0, 1, (3, 4, 4))
    pred = target + _away_from(rng.uniform(-0.5, 0.5, target.shape), [0.0])
    return check_function("mae_loss", lambda p: mae_loss(p, target), [pred], rng)


KERNEL_CHECKS: Dict[str, Callable[[np.random.Generator], CheckResult]] = {
    "conv2d": _conv,
    "max_pool2d": _pool,
    "max_unpool2d": _unpool,
    "upsample_bilinear2x": _bilinear,
    "nonlocal_softmax": _nonlocal_softmax,
    "nonlocal_raw_sum": _nonlocal_raw_sum,
    "concat_channels": _concat,
    "crop": _crop,
    "tile": _tile,
    "relu": _relu,
    "tanh": _tanh,
    "add": _add,
    "scale": _scale,
    "clamp": _clamp,
    "mae_loss": _mae,
}


# --- end-to-end ---

def check_network(
    config: ModelConfig,
    rng: np.random.Generator,
    size: int = 16,
    samples: int = SAMPLED_PARAMS,
    tolerance: float = NETWORK_TOL,
    step: float = NETWORK_STEP,
    name: str = "network",
) -> CheckResult:
    """MAE gradient of a randomly parameterised model w.r.t. a sample of parameter coordinates.

    Every parameter (including the zero-initialised fusion and exit convs) is
    redrawn so gradients reach the whole graph. The target sits at least 0.2
    away from the initial estimate so the loss has no kink near the stencil.
    """
    t0 = time.perf_counter()
    with precision(np.float64):
        model = init_parameters(config, seed=int(rng.integers(2**32)), dtype=np.float64)
        for pname, p in model.named_parameters():
            bound = 0.1 if pname.endswith(".bias") else _fan_in_bound(pname, p.shape)
            p.data = rng.uniform(-bound, bound, size=p.shape)

        image = rng.uniform(0.0, 1.0, (3, size, size))
        estimate, _ = forward(image, model, clamp=False)
        offset = rng.uniform(0.2, 0.5, image.shape) * rng.choice([-1.0, 1.0], size=image.shape)
        target = estimate.numpy() + offset

        def loss_value() -> float:
            return mae_loss(forward(image, model, clamp=False)[0], target).item()

        with GradTape() as tape:
            loss = mae_loss(forward(image, model, clamp=False)[0], target)
        grads = tape.backward(loss)

        params = list(model.named_parameters())
        sizes = np.array([p.data.size for _, p in params])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        picks = rng.choice(int(offsets[-1]), size=min(samples, int(offsets[-1])), replace=False)

        analytic, numeric = [], []
        for flat_index in np.sort(picks):
            which = int(np.searchsorted(offsets, flat_index, side="right") - 1)
            _, p = params[which]
            j = int(flat_index - offsets[which])
            flat = p.data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            plus = loss_value()
            flat[j] = orig - step
            minus = loss_value()
            flat[j] = orig
            numeric.append((plus - minus) / (2.0 * step))
            analytic.append(grads[p.id].reshape(-1)[j])
    err = relative_error(np.array(analytic), np.array(numeric))
    return CheckResult(name, err, tolerance, len(numeric), time.perf_counter() - t0)


def network_checks(scale: str) -> Dict[str, Callable[[np.random.Generator], CheckResult]]:
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}; expected one of {', '.join(SCALES)}")
    base = SCALES[scale]
    return {
        "network": lambda rng: check_network(base, rng, name="network"),
        "network_raw_sum": lambda rng: check_network(replace(base, affinity_mode="raw-sum"), rng, name="network_raw_sum"),
        "network_bilinear": lambda rng: check_network(replace(base, upsample_mode="bilinear"), rng, name="network_bilinear"),
    }


def run_suite(
    scale: str = "micro",
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
    extra: Optional[Dict[str, Callable[[np.random.Generator], CheckResult]]] = None,
) -> GradcheckReport:
    """Run the named checks (all by default) plus any `extra` ones, each with its own seeded rng."""
    registry = {**KERNEL_CHECKS, **network_checks(scale), **(extra or {})}
    selected = list(names) if names is not None else list(registry)
    unknown = [n for n in selected if n not in registry]
    if unknown:
        raise ValueError(f"unknown gradient check(s): {', '.join(unknown)}")

    report = GradcheckReport()
    for i, name in enumerate(selected):
        rng = np.random.default_rng([seed, i])
        result = registry[name](rng)
        logger.debug("%s: %.3e over %d coords (%.2fs)", name, result.max_rel_error, result.coordinates, result.seconds)
        report.results.append(result)
    return report

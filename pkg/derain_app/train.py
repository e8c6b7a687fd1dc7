"""MAE training with Adam, a plateau learning-rate schedule and exact resume.

A run writes into one output directory:

    step_000000.nledn          initial parameters
    step_XXXXXX.nledn          every `checkpoint_every` steps and at the end
    step_XXXXXX.state.json     optimizer scalars next to each checkpoint
    train_log.tsv              step, loss, lr, elapsed (appended on resume)
    last_good.nledn            only when the loss turns NaN
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Prefetcher, training_sample
from .errors import CheckpointError, NonFiniteGradientError, ShapeError, TrainingDivergedError
from .model import NledbnModel, forward
from .tensor import Function, GradTape, Tensor, as_tensor

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.tsv"
LAST_GOOD_NAME = "last_good.nledn"


# --- loss ---

class MeanAbsoluteError(Function):
    name = "mae_loss"

    def forward(self, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        diff = pred - target
        # np.sign gives 0 at exact ties, which is the subgradient we want
        self.sign = np.sign(diff)
        self.n = diff.size
        return np.asarray(np.abs(diff).mean(), dtype=pred.dtype)

    def backward(self, grad: np.ndarray):
        g = (self.sign * (grad / self.n)).astype(self.sign.dtype, copy=False)
        return g, -g


def mae_loss(pred: Tensor, target) -> Tensor:
    """(1 / HWC) * sum |pred - target|."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mae_loss", "prediction and target differ in shape", pred.shape, target.shape)
    return MeanAbsoluteError()(pred, target)


# --- optimizer ---

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 5e-4
    # plateau tracking
    loss_ema: Optional[float] = None
    best_ema: Optional[float] = None
    steps_since_best: int = 0

    @classmethod
    def fresh(cls, model: NledbnModel, cfg: TrainConfig) -> "OptimizerState":
        zeros = {name: np.zeros_like(p.data) for name, p in model.named_parameters()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, lr=cfg.lr_init)

    def scalars(self) -> dict:
        return {
            "step": self.step,
            "lr": self.lr,
            "loss_ema": self.loss_ema,
            "best_ema": self.best_ema,
            "steps_since_best": self.steps_since_best,
        }


def adam_step(model: NledbnModel, grads: Dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> None:
    """Decoupled weight decay, then one bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    state.step += 1
    t = state.step
    lr = state.lr
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in model.named_parameters():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype.type
        m = state.m[name] * dt(cfg.beta1) + g * dt(1.0 - cfg.beta1)
        v = state.v[name] * dt(cfg.beta2) + (g * g) * dt(1.0 - cfg.beta2)
        state.m[name], state.v[name] = m, v
        data = p.data - dt(lr * cfg.weight_decay) * p.data
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.eps))
        p.data = (data - dt(lr) * update).astype(p.data.dtype, copy=False)


def lr_schedule_step(state: OptimizerState, loss: float, cfg: TrainConfig) -> float:
    """Track an EMA of the loss and decay the lr after `plateau_patience` steps without a new minimum.

    The first EMA value only sets the baseline, so it counts as a step without
    improvement.
    """
    if state.loss_ema is None:
        state.loss_ema = float(loss)
    else:
        state.loss_ema += (1.0 - cfg.ema_decay) * (float(loss) - state.loss_ema)

    if state.best_ema is not None and state.loss_ema < state.best_ema:
        state.best_ema = state.loss_ema
        state.steps_since_best = 0
    else:
        if state.best_ema is None:
            state.best_ema = state.loss_ema
        state.steps_since_best += 1
        if state.steps_since_best >= cfg.plateau_patience:
            new_lr = max(state.lr * cfg.lr_decay_factor, cfg.lr_floor)
            if new_lr < state.lr:
                logger.info("loss plateaued; lr %.3g -> %.3g", state.lr, new_lr)
            state.lr = new_lr
            state.steps_since_best = 0
    return state.lr


# --- checkpoints with optimizer state ---

def checkpoint_path(out_dir: Path, step: int) -> Path:
    return Path(out_dir) / f"step_{step:06d}.nledn"


def sidecar_path(ckpt: Path) -> Path:
    return Path(ckpt).with_suffix(".state.json")


def save_training_state(model: NledbnModel, state: OptimizerState, cfg: TrainConfig, path: Path) -> Path:
    extra = {f"optim.m.{k}": a for k, a in state.m.items()}
    extra.update({f"optim.v.{k}": a for k, a in state.v.items()})
    save_checkpoint(model, path, extra)
    payload = {"optimizer": state.scalars(), "train": asdict(cfg)}
    atomic_write(sidecar_path(path), json.dumps(payload, indent=2).encode("utf-8"))
    return path


def load_training_state(path: str | Path) -> Tuple[NledbnModel, OptimizerState]:
    """Model plus optimizer state from a checkpoint written by `train_loop`."""
    path = Path(path)
    model, extra = load_checkpoint(path)
    side = sidecar_path(path)
    if not side.is_file():
        raise CheckpointError(f"cannot resume from {path}: training state {side.name} is missing")
    scalars = json.loads(side.read_text(encoding="utf-8"))["optimizer"]
    state = OptimizerState(
        step=int(scalars["step"]),
        lr=float(scalars["lr"]),
        loss_ema=scalars["loss_ema"],
        best_ema=scalars["best_ema"],
        steps_since_best=int(scalars["steps_since_best"]),
    )
    for name, p in model.named_parameters():
        for key, slot in (("m", state.m), ("v", state.v)):
            arr = extra.get(f"optim.{key}.{name}")
            if arr is None or arr.shape != p.shape:
                raise CheckpointError(f"checkpoint {path} has no usable optimizer moment optim.{key}.{name}")
            slot[name] = arr.astype(p.data.dtype)
    return model, state


# --- loop ---

@dataclass
class TrainResult:
    steps: int
    final_loss: Optional[float]
    lr: float
    checkpoints: List[Path]
    log_path: Path


def _named_grads(model: NledbnModel, by_id: Dict[int, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: by_id[p.id] for name, p in model.named_parameters() if p.id in by_id}


def train_step(model: NledbnModel, rainy: np.ndarray, clean: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Forward on the unclamped estimate, MAE loss, backward; returns (loss, grads by name)."""
    with GradTape() as tape:
        restored, _ = forward(rainy, model, clamp=False)
        loss = mae_loss(restored, clean)
    value = loss.item()
    if not math.isfinite(value):
        return value, {}
    return value, _named_grads(model, tape.backward(loss))


def train_loop(
    model: NledbnModel,
    dataset,
    cfg: TrainConfig,
    out_dir: str | Path,
    state: Optional[OptimizerState] = None,
    queue_capacity: int = 4,
) -> TrainResult:
    """Train until `cfg.max_steps` optimizer steps have been taken in total.

    Passing the `state` from `load_training_state` continues a run; the data order
    and flip draws depend only on (seed, step), so the continuation follows the
    same parameter trajectory as an uninterrupted run.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME
    resuming = state is not None
    state = state or OptimizerState.fresh(model, cfg)
    model.requires_grad_(True)

    checkpoints: List[Path] = []
    if not resuming:
        checkpoints.append(save_training_state(model, state, cfg, checkpoint_path(out, 0)))
        log_path.write_text("step\tloss\tlr\telapsed\n", encoding="utf-8")
    else:
        logger.info("resuming at step %d (lr %.3g)", state.step, state.lr)
        if not log_path.exists():
            log_path.write_text("step\tloss\tlr\telapsed\n", encoding="utf-8")

    start = state.step
    if start >= cfg.max_steps:
        return TrainResult(start, None, state.lr, checkpoints, log_path)

    t0 = time.perf_counter()
    last_loss: Optional[float] = None
    loader = Prefetcher(lambda s: training_sample(dataset, cfg.seed, s), start, cfg.max_steps, queue_capacity)
    try:
        with log_path.open("a", encoding="utf-8") as log:
            for step, pair in loader:
                loss, grads = train_step(model, pair.rainy, pair.clean)
                if not math.isfinite(loss):
                    # parameters still hold the last finite step
                    good = save_checkpoint(model, out / LAST_GOOD_NAME)
                    logger.error("loss is %s at step %d; stopping", loss, step + 1)
                    raise TrainingDivergedError(step + 1, good)
                adam_step(model, grads, state, cfg)
                lr_schedule_step(state, loss, cfg)
                last_loss = loss

                elapsed = time.perf_counter() - t0
                log.write(f"{state.step}\t{loss:.8f}\t{state.lr:.8g}\t{elapsed:.3f}\n")
                if state.step % cfg.log_every == 0:
                    log.flush()
                    logger.info("step %d loss %.5f lr %.3g (%.1fs)", state.step, loss, state.lr, elapsed)
                if state.step % cfg.checkpoint_every == 0 or state.step == cfg.max_steps:
                    checkpoints.append(save_training_state(model, state, cfg, checkpoint_path(out, state.step)))
    finally:
        loader.close()

    return TrainResult(state.step, last_loss, state.lr, checkpoints, log_path)

"""Dense tensors and the reverse-mode gradient tape.

A `Tensor` wraps a C-contiguous numpy array (feature maps are C x H x W, conv
kernels are O x I x kH x kW). Differentiable kernels live in `ops.py`; each one
is a `Function` whose call runs the forward pass and, when a `GradTape` is
active and an input requires gradients, appends an entry to that tape.

    with GradTape() as tape:
        loss = train.mae_loss(model.forward(x, clamp=False)[0], y)
    grads = tape.backward(loss)
"""

from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import TapeError

_ids = itertools.count(1)
_local = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    previous = get_default_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = previous


def debug_checks_enabled() -> bool:
    return os.getenv("NLEDN_DEBUG", "").lower() in {"1", "true", "yes"}


class Tensor:
    """Immutable-by-convention array plus autodiff bookkeeping.

    Only leaves (parameters) are ever reassigned, and only by the optimizer.
    """

    __slots__ = ("data", "requires_grad", "grad", "id", "creator")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, creator: Optional["Function"] = None):
        if dtype is None:
            keep = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if keep else get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)
        self.creator = creator

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Convenience operators; the kernels themselves live in ops.py.
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def sum(self) -> "Tensor":
        from . import ops

        return ops.sum_all(self)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    op: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor

    @property
    def output_id(self) -> int:
        return self.output.id


@dataclass
class GradTape:
    """Ordered record of differentiable operations for one forward pass.

    Entries are appended in execution order, so the list is topologically
    sorted by construction. A tape belongs to the thread that entered it.
    """

    entries: List[TapeEntry] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: "Function", inputs: Sequence[Tensor], output: Tensor) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape after backward()")
        self.entries.append(TapeEntry(op, tuple(inputs), output))

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) to every reachable leaf that requires grad.

        Returns {leaf id: gradient} and also stores each gradient on `leaf.grad`.
        Fan-out is handled by accumulation, which the skip paths rely on.
        """
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or loss.creator is None:
            raise TapeError("loss was not produced on this tape from inputs that require grad")
        self.consumed = True

        grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            upstream = grads.pop(entry.output_id, None)
            if upstream is None:
                continue
            input_grads = entry.op.backward(upstream)
            for tensor, g in zip(entry.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if tensor.id in grads:
                    grads[tensor.id] = grads[tensor.id] + g
                else:
                    grads[tensor.id] = g
                if tensor.is_leaf:
                    leaves[tensor.id] = tensor
        out: Dict[int, np.ndarray] = {}
        for leaf_id, leaf in leaves.items():
            g = grads[leaf_id].astype(leaf.dtype, copy=False)
            leaf.grad = g
            out[leaf_id] = g
        self.entries.clear()
        return out


def _tape_stack() -> List[GradTape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Function:
    """Base class for differentiable kernels.

    Subclasses implement `forward(*arrays)` returning an ndarray and
    `backward(grad)` returning one gradient (or None) per input. Anything the
    backward pass needs is saved on `self` during forward, so an instance is
    used for exactly one call.
    """

    name = "function"

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    def __call__(self, *inputs: Tensor) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        out_data = self.forward(*(t.data for t in tensors))
        if debug_checks_enabled() and not np.all(np.isfinite(out_data)):
            raise FloatingPointError(f"{self.name}: non-finite output from finite inputs")
        tape = active_tape()
        track = tape is not None and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype, creator=self if track else None)
        if track:
            tape.record(self, tensors, out)
        return out

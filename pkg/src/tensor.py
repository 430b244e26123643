"""
Dense tensor type and tape-based reverse-mode automatic differentiation.

A `Tape` made current with `with Tape() as tape:` records every
differentiable op whose inputs require gradients. Ops run outside any tape
record nothing, which is how inference runs. The current tape is held in a
context variable, so tapes on different threads never see each other.
"""

import logging
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

from src.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
MAX_RANK = 4

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)
_active_tally: ContextVar[Optional["OpTally"]] = ContextVar("active_tally", default=None)


def check_finite(arr: np.ndarray, what: str):
    """Raise NonFiniteError if arr holds NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    """
    A dense N×C×H×W (rank 0–4) float array with an optional gradient slot.

    Tensors produced by ops are never mutated by the library; `grad` is the
    only slot backward writes to.
    """

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass(frozen=True)
class OpCost:
    """Cost of one op: multiply-accumulates and other per-element operations."""

    macs: int = 0
    elementwise: int = 0


class Function:
    """
    Base class for differentiable kernels.

    Subclasses implement `forward` on raw arrays and `backward`, which maps
    the gradient of the output to one gradient (or None) per input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    def cost(self, out: np.ndarray) -> OpCost:
        return OpCost(elementwise=int(out.size))

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls()
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        check_finite(out_data, cls.__name__)

        tape = _active_tape.get()
        track = tape is not None and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=track)
        if track:
            tape.record(fn, inputs, out)

        tally = _active_tally.get()
        if tally is not None:
            tally.add(cls.__name__, fn.cost(out_data))
        return out


@dataclass
class _Node:
    position: int
    fn: Function
    inputs: tuple[Tensor, ...]
    output: Tensor


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.position = 0
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, fn: Function, inputs: Sequence[Tensor], output: Tensor):
        self._nodes.append(_Node(self.position, fn, tuple(inputs), output))
        self.position += 1

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None):
        """
        Propagate d(output) back through the recorded ops in exact reverse order.

        `grad` defaults to ones for a single-element output. Every tensor that
        requires grad and lies on a path to `output` has its `.grad`
        accumulated (added to any gradient from earlier passes).
        """
        if grad is None:
            if output.size != 1:
                raise ShapeError(f"backward from a non-scalar output {output.shape} needs an explicit grad")
            grad = np.ones_like(output.data)
        if grad.shape != output.shape:
            raise ShapeError(f"seed gradient {grad.shape} does not match output {output.shape}")

        pending: dict[int, tuple[Tensor, np.ndarray]] = {id(output): (output, grad)}
        for node in reversed(self._nodes):
            entry = pending.pop(id(node.output), None)
            if entry is None:
                continue
            _, g = entry
            node.output.accumulate_grad(g)
            input_grads = node.fn.backward(g)
            for t, gi in zip(node.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                check_finite(gi, f"backward of {type(node.fn).__name__}")
                key = id(t)
                if key in pending:
                    pending[key] = (t, pending[key][1] + gi)
                else:
                    pending[key] = (t, gi)

        # leaves (parameters, inputs) never appear as a node output
        for t, g in pending.values():
            t.accumulate_grad(g)


class OpTally:
    """Records the cost of every op executed while it is active."""

    def __init__(self):
        self.records: list[tuple[str, OpCost]] = []
        self._token = None

    def __enter__(self) -> "OpTally":
        self._token = _active_tally.set(self)
        return self

    def __exit__(self, *exc):
        _active_tally.reset(self._token)
        self._token = None
        return False

    def add(self, name: str, cost: OpCost):
        self.records.append((name, cost))

    @property
    def macs(self) -> int:
        return sum(c.macs for _, c in self.records)

    @property
    def elementwise(self) -> int:
        return sum(c.elementwise for _, c in self.records)

    def by_op(self) -> dict[str, OpCost]:
        out: dict[str, OpCost] = {}
        for name, c in self.records:
            prev = out.get(name, OpCost())
            out[name] = OpCost(prev.macs + c.macs, prev.elementwise + c.elementwise)
        return out

"""Rank-4 tensors, the recording tape and trainable parameters.

Ops record onto the innermost active :class:`Tape`. Outside a tape nothing
is recorded, which keeps eval-mode forward passes allocation-light and safe
to run from several threads over disjoint inputs.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "TapeError",
    "NonFiniteError",
    "backward",
    "active_tape",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "checked",
    "set_checked",
    "is_checked",
]

_local = threading.local()
_config = {"dtype": np.dtype(np.float32), "checked": False}


class TapeError(RuntimeError):
    """Raised on misuse of the tape (double backward, non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


def default_dtype() -> np.dtype:
    return _config["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _config["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point type."""
    old = _config["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _config["dtype"] = old


def set_checked(flag: bool) -> None:
    _config["checked"] = bool(flag)


def is_checked() -> bool:
    return _config["checked"]


@contextlib.contextmanager
def checked(flag: bool = True):
    """Enable NaN/Inf detection after every op inside the block."""
    old = _config["checked"]
    _config["checked"] = bool(flag)
    try:
        yield
    finally:
        _config["checked"] = old


class Tensor:
    """A thin wrapper around a contiguous row-major ndarray.

    Feature maps are (n, c, h, w); losses are 0-d.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        # ascontiguousarray would promote 0-d losses to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.array(arr, order="C")
        self.grad: Optional[np.ndarray] = None
        self._requires_grad = bool(requires_grad)
        # (tape, node index) when this tensor was produced by a recorded op
        self._node: Optional[Tuple["Tape", int]] = None

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self._requires_grad = bool(flag)

    @property
    def tape_id(self) -> Optional[int]:
        return None if self._node is None else self._node[1]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    dims = shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic is routed through ops so it records on the tape.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


class Parameter(Tensor):
    """A leaf tensor owned by a module, with an SGD momentum buffer.

    ``requires_grad`` mirrors ``trainable``; freezing a parameter therefore
    also stops ops from recording gradient paths into it.
    """

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.momentum_buffer = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self._requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._requires_grad = bool(flag)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.momentum_buffer = self.momentum_buffer.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype}, trainable={self.trainable})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("out", "parents", "fn", "name")

    def __init__(self, out: Tensor, parents: Tuple[Tensor, ...], fn: BackwardFn, name: str):
        self.out = out
        self.parents = parents
        self.fn = fn
        self.name = name


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager; ops executed inside the block whose inputs
    require gradients are appended in execution order, so append order is a
    valid topological order.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Tuple[Tensor, ...], fn: BackwardFn, name: str) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        out._node = (self, len(self.nodes))
        out.requires_grad = True
        self.nodes.append(_Node(out, parents, fn, name))

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Populate ``.grad`` of every leaf reachable from ``loss``.

        Leaf gradients are reset to zero first, so leaves that are recorded
        on the tape (or passed in ``params``) but unreachable end up zero.
        A tape can be consumed only once.
        """
        if self.consumed:
            raise TapeError("backward called twice on a consumed tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._node is None or loss._node[0] is not self:
            raise TapeError("loss was not recorded on this tape")

        for p in params:
            p.grad = np.zeros_like(p.data)
        for node in self.nodes:
            for parent in node.parents:
                if parent.requires_grad and not self._owns(parent):
                    parent.grad = np.zeros_like(parent.data)

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss._node[1]] = np.ones_like(loss.data)
        for idx in range(len(self.nodes) - 1, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            grads[idx] = None
            node = self.nodes[idx]
            for parent, pg in zip(node.parents, node.fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if self._owns(parent):
                    j = parent._node[1]
                    grads[j] = pg if grads[j] is None else grads[j] + pg
                else:
                    parent.grad += pg
        self.consumed = True
        self.nodes = []

    def _owns(self, t: Tensor) -> bool:
        return t._node is not None and t._node[0] is self


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Run reverse-mode differentiation from ``loss`` on the tape that recorded it."""
    if loss._node is None:
        raise TapeError("loss is not attached to any tape")
    loss._node[0].backward(loss, params)

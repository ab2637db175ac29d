"""Dense float tensors and the reverse-mode gradient tape."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class NumericError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (consumed twice, foreign loss, ...)."""


_local = threading.local()


def default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    previous = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float array that can take part in gradient recording.

    Gradients are only recorded for operations executed while a
    :class:`Tape` is active on the current thread.  ``grad`` is populated
    for leaf tensors (those not produced by a recorded operation).
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        target = dtype if dtype is not None else default_dtype()
        if arr.dtype != target:
            arr = arr.astype(target)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{label}, requires_grad={self.requires_grad})"

    # Arithmetic sugar delegates to the primitive registry.
    def __add__(self, other):
        from . import ops

        return ops.add(self, as_tensor(other))

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(as_tensor(other), -1.0))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.element_mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, as_tensor(other))


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("kind", "inputs", "out", "backward", "tape")

    def __init__(self, kind: str, inputs: Sequence[Tensor], out: Tensor, backward: Callable, tape: "Tape"):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.out = out
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations on one thread.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, which is a
    topological order by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - defensive
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` in a tensor, recording the op when gradients flow."""
    if not np.all(np.isfinite(out_data)):
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NumericError(f"{kind}: non-finite output for inputs of shape {shapes}")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = current_tape()
    if tape is not None and not tape.consumed and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(kind, inputs, out, backward_fn, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss`` through every node on ``tape``.

    Leaf gradients accumulate into ``Tensor.grad`` across calls; a tape can
    only be replayed once.
    """
    if tape.consumed:
        raise TapeError("tape already consumed")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss._node is None or loss._node.tape is not tape:
        raise TapeError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp._node.tape is tape:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.consumed = True
    tape.nodes = []

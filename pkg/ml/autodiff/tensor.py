from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ml.errors import ShapeError

_DTYPE: ContextVar[np.dtype] = ContextVar("tensor_dtype", default=np.dtype(np.float32))
_GRAD_ENABLED: ContextVar[bool] = ContextVar("tensor_grad_enabled", default=True)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def default_dtype() -> np.dtype:
    """Storage dtype used for tensors created in the current context."""
    return _DTYPE.get()


@contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """Select float32 (training) or float64 (gradient checking) storage for new tensors."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported tensor precision: {dtype}")
    token = _DTYPE.set(dtype)
    try:
        yield dtype
    finally:
        _DTYPE.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward operations without recording them for backward()."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and the adjoint that maps dL/dout to dL/dinputs."""

    op: str
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn


class Tensor:
    """Dense row-major float array with an optional gradient.

    Tensors produced by operations are never mutated; only leaf parameters are
    replaced by the training task that owns them.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        op: str,
        inputs: Sequence["Tensor"],
        backward: BackwardFn,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.grad = None
        out._node = None
        out.requires_grad = False
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = Node(op, tuple(inputs), backward)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def op(self) -> Optional[str]:
        return None if self._node is None else self._node.op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        from ml.autodiff import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from ml.autodiff import ops

        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from ml.autodiff import ops

        return ops.mul(self, other)

    def __neg__(self) -> "Tensor":
        from ml.autodiff import ops

        return ops.scale(self, -1.0)

    def __repr__(self) -> str:
        grad = "" if not self.requires_grad else ", requires_grad=True"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"


class ComputationTape:
    """Operations reachable from a root, in topological order (producers first)."""

    def __init__(self, entries: List[Tensor]):
        self.entries = entries

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in reversed(tensor._node.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.entries)

    def operations(self) -> List[str]:
        return [t.op for t in self.entries if t.op is not None]


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every requires_grad leaf reachable from a scalar root.

    Leaf gradients accumulate into any existing ``grad``; call ``zero_grad`` between steps.
    """
    if root.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward() root is not connected to any tensor that requires grad")

    tape = ComputationTape.record(root)
    pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for tensor in reversed(tape.entries):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor._node is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        input_grads = tensor._node.backward(grad)
        for parent, parent_grad in zip(tensor._node.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad)
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad

from __future__ import annotations

import hashlib
from typing import Dict, Iterator, Tuple

import numpy as np

from ml.autodiff.tensor import Tensor


class ParameterSet:
    """Ordered, uniquely named collection of learnable tensors."""

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"Duplicate parameter name: {name}")
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def names(self):
        return list(self._tensors)

    def count(self) -> int:
        """Number of scalar parameters."""
        return sum(t.size for t in self._tensors.values())

    def set_requires_grad(self, flag: bool) -> None:
        for tensor in self._tensors.values():
            tensor.requires_grad = flag

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def digest(self) -> str:
        """SHA-256 over names, shapes, dtypes and raw bytes."""
        h = hashlib.sha256()
        for name, tensor in self._tensors.items():
            h.update(name.encode("utf-8"))
            h.update(repr(tensor.shape).encode("ascii"))
            h.update(tensor.dtype.str.encode("ascii"))
            h.update(np.ascontiguousarray(tensor.data).tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(bool(np.isfinite(t.data).all()) for t in self._tensors.values())

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} tensors, {self.count()} values)"


def count_parameters(params: ParameterSet) -> int:
    return params.count()


def parameter_digest(params: ParameterSet) -> str:
    return params.digest()

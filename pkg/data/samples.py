from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class DepthSample:
    """One RGB image with its metric depth map; depth 0 marks an invalid pixel."""

    id: str
    rgb: np.ndarray  # (3, H, W) float32 in [0, 1]
    depth: np.ndarray  # (1, H, W) float32 meters
    mask: np.ndarray  # (1, H, W) bool, depth > 0

    @classmethod
    def from_arrays(cls, sample_id: str, rgb: np.ndarray, depth: np.ndarray) -> "DepthSample":
        depth = np.asarray(depth, dtype=np.float32)
        if depth.ndim == 2:
            depth = depth[None]
        return cls(
            id=sample_id,
            rgb=np.asarray(rgb, dtype=np.float32),
            depth=depth,
            mask=depth > 0,
        )

    @property
    def height(self) -> int:
        return int(self.depth.shape[1])

    @property
    def width(self) -> int:
        return int(self.depth.shape[2])

    def replace(self, **changes) -> "DepthSample":
        fields = {"id": self.id, "rgb": self.rgb, "depth": self.depth, "mask": self.mask}
        fields.update(changes)
        return DepthSample(**fields)


def stack_samples(samples: Sequence[DepthSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(N, 3, H, W) rgb, (N, 1, H, W) depth and mask arrays of a batch."""
    if not samples:
        raise ValueError("Cannot stack an empty batch")
    rgb = np.stack([s.rgb for s in samples])
    depth = np.stack([s.depth for s in samples])
    mask = np.stack([s.mask for s in samples])
    return rgb, depth, mask


def index_by_id(samples: Sequence[DepthSample]) -> dict:
    index = {}
    for sample in samples:
        if sample.id in index:
            raise ValueError(f"Duplicate sample id: {sample.id}")
        index[sample.id] = sample
    return index


def select(samples: Sequence[DepthSample], ids: Sequence[str]) -> List[DepthSample]:
    index = index_by_id(samples)
    return [index[i] for i in ids]

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Sequence

from data.samples import DepthSample


class DatasetConnector(ABC):
    """Base class for all depth dataset connectors."""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        self.config = config or {}

    @abstractmethod
    def list_ids(self) -> List[str]:
        """Sample ids in manifest order."""
        pass

    @abstractmethod
    def load_sample(self, sample_id: str) -> DepthSample:
        """Read one sample."""
        pass

    @abstractmethod
    def save_sample(self, sample: DepthSample) -> None:
        """Persist one sample."""
        pass

    def load_all(self, ids: Optional[Sequence[str]] = None) -> List[DepthSample]:
        return [self.load_sample(i) for i in (self.list_ids() if ids is None else ids)]

    def save_all(self, samples: Sequence[DepthSample]) -> None:
        for sample in samples:
            self.save_sample(sample)

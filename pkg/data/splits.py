from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from data.samples import DepthSample, index_by_id

MIXER_FRACTION_DENOMINATOR = 8  # 7 parts base, 1 part mixer


@dataclass
class DatasetSplit:
    train_base: List[str]
    train_mixer: List[str]
    test: List[str] = field(default_factory=list)

    def __post_init__(self):
        seen: Dict[str, str] = {}
        for name in ("train_base", "train_mixer", "test"):
            for sample_id in getattr(self, name):
                if sample_id in seen:
                    raise ValueError(f"Sample {sample_id} is in both {seen[sample_id]} and {name}")
                seen[sample_id] = name

    def to_dict(self) -> Dict[str, List[str]]:
        return {"train_base": self.train_base, "train_mixer": self.train_mixer, "test": self.test}


def split_dataset(
    samples: Sequence[DepthSample],
    seed: int,
    test: Optional[Sequence[DepthSample]] = None,
) -> DatasetSplit:
    """
    Shuffle training samples and hold out floor(N / 8) of them for the mixer.

    Args:
        samples: Training samples (at least 8)
        seed: Shuffle seed
        test: Separately supplied test samples

    Returns:
        DatasetSplit with disjoint id lists
    """
    ids = list(index_by_id(samples))
    if len(ids) < MIXER_FRACTION_DENOMINATOR:
        raise ValueError(
            f"Splitting needs at least {MIXER_FRACTION_DENOMINATOR} training samples, "
            f"got {len(ids)}"
        )
    order = np.random.default_rng(np.random.SeedSequence(int(seed))).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_mixer = len(ids) // MIXER_FRACTION_DENOMINATOR
    return DatasetSplit(
        train_base=shuffled[n_mixer:],
        train_mixer=shuffled[:n_mixer],
        test=[s.id for s in test or []],
    )

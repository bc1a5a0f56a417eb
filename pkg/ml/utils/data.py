from __future__ import annotations

import json
from pathlib import Path
from typing import List, Union

from data.connectors.directory import DirectoryConnector
from data.samples import DepthSample
from data.splits import DatasetSplit

SPLITS = ("train", "test", "shifted")


def dataset_dir(run_dir: Union[str, Path], split: str) -> Path:
    """Directory of one generated split inside a run directory."""
    if split not in SPLITS:
        raise ValueError(f"Unknown split '{split}', expected one of {SPLITS}")
    return Path(run_dir) / "data" / split


def load_split_samples(run_dir: Union[str, Path], split: str) -> List[DepthSample]:
    connector = DirectoryConnector(dataset_dir(run_dir, split))
    if not connector.exists():
        raise FileNotFoundError(
            f"No '{split}' dataset under {run_dir}; run the synth command first"
        )
    return connector.load_all()


def save_split_samples(
    run_dir: Union[str, Path], split: str, samples: List[DepthSample]
) -> Path:
    connector = DirectoryConnector(dataset_dir(run_dir, split))
    connector.save_all(samples)
    return connector.manifest_path


def split_path(run_dir: Union[str, Path]) -> Path:
    return Path(run_dir) / "data" / "split.json"


def save_split(run_dir: Union[str, Path], split: DatasetSplit) -> Path:
    path = split_path(run_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(split.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def load_split(run_dir: Union[str, Path]) -> DatasetSplit:
    path = split_path(run_dir)
    if not path.exists():
        raise FileNotFoundError(f"No dataset split at {path}; run the synth command first")
    return DatasetSplit(**json.loads(path.read_text(encoding="utf-8")))

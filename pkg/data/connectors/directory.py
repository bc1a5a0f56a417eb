from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from data.codecs import read_pfm, read_pnm, write_pfm, write_pnm
from data.connectors.base import DatasetConnector
from data.samples import DepthSample
from data.validation.data_quality import DepthSampleValidator
from ml.errors import CodecError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"


class DirectoryConnector(DatasetConnector):
    """
    Dataset stored as `<root>/<id>.rgb.ppm` (16-bit) and `<root>/<id>.depth.pfm`,
    with `<root>/manifest.txt` listing ids one per line.
    """

    def __init__(self, root: Union[str, Path], config: Optional[Dict[str, Any]] = None):
        super().__init__(config)
        self.root = Path(root)
        self.bitdepth = int(self.config.get("rgb_bitdepth", 16))
        self.validator = DepthSampleValidator()

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def rgb_path(self, sample_id: str) -> Path:
        return self.root / f"{sample_id}.rgb.ppm"

    def depth_path(self, sample_id: str) -> Path:
        return self.root / f"{sample_id}.depth.pfm"

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def list_ids(self) -> List[str]:
        if not self.exists():
            raise FileNotFoundError(f"No dataset manifest at {self.manifest_path}")
        lines = self.manifest_path.read_text(encoding="utf-8").splitlines()
        return [line.strip() for line in lines if line.strip()]

    def load_sample(self, sample_id: str) -> DepthSample:
        rgb = read_pnm(self.rgb_path(sample_id))
        depth = read_pfm(self.depth_path(sample_id))
        if rgb.shape[0] != 3 or depth.shape[0] != 1:
            raise CodecError(f"Sample {sample_id}: expected a color image and a 1-channel depth")
        sample = DepthSample.from_arrays(sample_id, rgb, depth)
        result = self.validator.validate(sample)
        if not result["passed"]:
            raise ValueError(f"Sample {sample_id} failed validation: {result['issues']}")
        return sample

    def save_sample(self, sample: DepthSample) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        write_pnm(self.rgb_path(sample.id), sample.rgb, bitdepth=self.bitdepth)
        write_pfm(self.depth_path(sample.id), sample.depth)

    def save_all(self, samples) -> None:
        super().save_all(samples)
        self.manifest_path.write_text("".join(f"{s.id}\n" for s in samples), encoding="utf-8")
        logger.info("Wrote %d samples to %s", len(samples), self.root)

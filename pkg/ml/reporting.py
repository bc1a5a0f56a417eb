from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel, Field

from ml.evaluation.metrics import RANGE_COLUMNS, REPORT_COLUMNS, MetricsReport

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
METRICS_CSV = "metrics.csv"
RANGES_CSV = "ranges.csv"
DIVERSITY_CSV = "diversity.csv"
ABLATION_CSV = "ablation.csv"

METRICS_CSV_COLUMNS = ["model", "params"] + REPORT_COLUMNS
RANGES_CSV_COLUMNS = ["model"] + RANGE_COLUMNS
ABLATION_CSV_COLUMNS = (
    ["seed", "kind", "location", "count", "params", "macs"] + REPORT_COLUMNS + ["best_base_rmse"]
)


class RunManifest(BaseModel):
    """Everything one run produced; paths are relative to the run directory."""

    run_id: str
    config_hash: str
    split: str = "test"
    checkpoints: Dict[str, str] = Field(default_factory=dict)
    csvs: Dict[str, str] = Field(default_factory=dict)
    params: Dict[str, int] = Field(default_factory=dict)
    reports: Dict[str, Dict[str, Union[int, float]]] = Field(default_factory=dict)
    ranges: List[Dict[str, Any]] = Field(default_factory=list)

    def add_report(self, name: str, report: MetricsReport, params: int) -> None:
        self.reports[name] = report.as_row()
        self.params[name] = int(params)

    def report(self, name: str) -> MetricsReport:
        return MetricsReport.from_row(self.reports[name])

    def files(self) -> List[str]:
        return list(self.checkpoints.values()) + list(self.csvs.values())


def manifest_path(run_dir: Union[str, Path]) -> Path:
    return Path(run_dir) / MANIFEST_NAME


def load_manifest(run_dir: Union[str, Path]) -> Optional[RunManifest]:
    path = manifest_path(run_dir)
    if not path.exists():
        return None
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


def write_manifest(run_dir: Union[str, Path], manifest: RunManifest) -> Path:
    """Write manifest.json after checking that every file it names exists."""
    run_dir = Path(run_dir)
    missing = [name for name in manifest.files() if not (run_dir / name).exists()]
    if missing:
        raise FileNotFoundError(f"Manifest references missing files: {missing}")
    path = manifest_path(run_dir)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def write_rows(
    path: Union[str, Path], rows: Sequence[Dict[str, Any]], columns: List[str]
) -> Path:
    """Write rows as CSV with a fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=columns).to_csv(path, index=False)
    return path


def read_rows(path: Union[str, Path]) -> List[Dict[str, Any]]:
    df = pd.read_csv(path)
    return df.astype(object).where(df.notna(), None).to_dict(orient="records")


def emit_report(manifest: RunManifest, run_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Write metrics.csv and ranges.csv for a finished run.

    Args:
        manifest: Run whose reports and range rows are written, in stored order
        run_dir: Run directory

    Returns:
        Mapping of CSV name to path; the manifest records the relative paths
    """
    run_dir = Path(run_dir)
    metrics_rows = [
        {"model": name, "params": manifest.params.get(name, 0), **row}
        for name, row in manifest.reports.items()
    ]
    written = {"metrics": write_rows(run_dir / METRICS_CSV, metrics_rows, METRICS_CSV_COLUMNS)}
    manifest.csvs["metrics"] = METRICS_CSV
    if manifest.ranges:
        written["ranges"] = write_rows(run_dir / RANGES_CSV, manifest.ranges, RANGES_CSV_COLUMNS)
        manifest.csvs["ranges"] = RANGES_CSV
    logger.info("Wrote %s", ", ".join(str(p) for p in written.values()))
    return written

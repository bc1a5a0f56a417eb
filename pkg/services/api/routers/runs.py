import logging
import os
import sys
from pathlib import Path
from typing import List

from fastapi import APIRouter, HTTPException
from pydantic import ValidationError

from models import ModelMetrics, RangeRow, RunDetail, RunMetrics, RunStatus, RunSummary

# Add repo root to path for ml imports
repo_root = Path(__file__).resolve().parents[3]
if str(repo_root) not in sys.path:
    sys.path.append(str(repo_root))

from ml.config import OUTPUT_ENV_VAR  # type: ignore  # noqa: E402
from ml.reporting import RunManifest, load_manifest, manifest_path  # type: ignore  # noqa: E402

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/runs", tags=["runs"])


def runs_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV_VAR) or "runs")


def _status(manifest: RunManifest) -> RunStatus:
    if manifest.reports:
        return RunStatus.EVALUATED
    if manifest.checkpoints:
        return RunStatus.TRAINED
    return RunStatus.SYNTHESIZED


def _load(run_id: str) -> RunManifest:
    run_dir = runs_root() / run_id
    if run_id in ("", ".", "..") or "/" in run_id or not manifest_path(run_dir).exists():
        raise HTTPException(status_code=404, detail="Run not found")
    try:
        manifest = load_manifest(run_dir)
    except (OSError, ValidationError, ValueError) as exc:
        logger.error("Unreadable manifest for run %s: %s", run_id, exc)
        raise HTTPException(status_code=500, detail=f"Unreadable manifest: {exc}")
    return manifest


def _summary(run_id: str, manifest: RunManifest) -> RunSummary:
    return RunSummary(
        run_id=run_id,
        config_hash=manifest.config_hash,
        status=_status(manifest),
        models=list(manifest.checkpoints),
    )


@router.get("/", response_model=List[RunSummary])
def list_runs():
    """Runs under the output directory that have a manifest, sorted by id."""
    root = runs_root()
    if not root.is_dir():
        return []
    summaries = []
    for run_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if not manifest_path(run_dir).exists():
            continue
        try:
            summaries.append(_summary(run_dir.name, load_manifest(run_dir)))
        except (OSError, ValidationError, ValueError) as exc:
            logger.warning("Skipping run %s: %s", run_dir.name, exc)
    return summaries


@router.get("/{run_id}", response_model=RunDetail)
def get_run(run_id: str):
    manifest = _load(run_id)
    return RunDetail(
        **_summary(run_id, manifest).model_dump(),
        split=manifest.split,
        checkpoints=manifest.checkpoints,
        csvs=manifest.csvs,
        params=manifest.params,
    )


@router.get("/{run_id}/metrics", response_model=RunMetrics)
def get_run_metrics(run_id: str):
    """Per-model metrics and per-band RMSE of the last evaluation."""
    manifest = _load(run_id)
    if not manifest.reports:
        raise HTTPException(status_code=404, detail="Run has not been evaluated")
    return RunMetrics(
        run_id=run_id,
        split=manifest.split,
        metrics=[
            ModelMetrics(model=name, params=manifest.params.get(name, 0), **row)
            for name, row in manifest.reports.items()
        ],
        ranges=[RangeRow(**row) for row in manifest.ranges],
    )

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from ml.config import TrackingConfig

logger = logging.getLogger(__name__)


class RunTracker:
    """Optional MLflow tracking for training and evaluation runs.

    When tracking is disabled every method is a no-op, so runs never depend on a
    tracking store.
    """

    def __init__(self, cfg: Optional[TrackingConfig] = None, run_dir: Optional[Path] = None):
        self.cfg = cfg or TrackingConfig()
        self.enabled = bool(self.cfg.enabled)
        self._mlflow = None
        self._active = False
        if not self.enabled:
            return
        import mlflow

        self._mlflow = mlflow
        uri = self.cfg.uri or os.environ.get("MLFLOW_TRACKING_URI")
        if not uri:
            base = Path(run_dir) if run_dir is not None else Path(".")
            uri = f"file://{(base / 'mlruns').resolve()}"
        mlflow.set_tracking_uri(uri)
        mlflow.set_experiment(self.cfg.experiment)

    def start_training_run(
        self, name: str, params: Optional[Dict[str, Any]] = None
    ) -> Optional[str]:
        """Start an MLflow run and log its parameters."""
        if not self.enabled:
            return None
        run = self._mlflow.start_run(run_name=name)
        self._active = True
        if params:
            self._mlflow.log_params({key: str(value) for key, value in params.items()})
        self._mlflow.set_tags({"task": "depth-ensemble", "stage": name})
        return run.info.run_id

    def log_epoch(self, step: int, metrics: Dict[str, float]) -> None:
        if self._active:
            self._mlflow.log_metrics(metrics, step=step)

    def log_report(self, prefix: str, report) -> None:
        """Log the numeric columns of a MetricsReport under `prefix.`."""
        if self._active:
            row = report.as_row()
            metrics = {f"{prefix}.{key}": float(value) for key, value in row.items()}
            self._mlflow.log_metrics(metrics)

    def log_artifact(self, path: Path) -> None:
        if self._active:
            self._mlflow.log_artifact(str(path))

    def end(self) -> None:
        if self._active:
            self._mlflow.end_run()
            self._active = False
            logger.debug("Closed MLflow run")

    def __enter__(self) -> "RunTracker":
        return self

    def __exit__(self, *exc) -> None:
        self.end()

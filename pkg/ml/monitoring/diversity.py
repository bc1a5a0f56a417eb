from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Dict, List, Tuple

import numpy as np
from scipy import stats

from data.exports import pca_principal_channel
from ml.evaluation.evaluate import Predictions

logger = logging.getLogger(__name__)

DIVERSITY_COLUMNS = ["predictor_a", "predictor_b", "feature_corr", "error_corr"]


class DiversityIssue(str, Enum):
    DUPLICATE_FEATURES = "duplicate_features"
    DUPLICATE_ERRORS = "duplicate_errors"


@dataclass
class DiversityAlert:
    issue: DiversityIssue
    severity: str  # "medium", "high"
    message: str
    metric_value: float
    threshold: float
    predictor_a: str
    predictor_b: str


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson r of two flattened arrays; NaN when either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(stats.pearsonr(a, b)[0])


def principal_maps(features: np.ndarray) -> np.ndarray:
    """First principal channel of every (C, H, W) map in an (N, C, H, W) stack."""
    return np.stack([pca_principal_channel(f) for f in features])


class DiversityAnalyzer:
    """Detect base predictors that have collapsed onto near-identical behaviour."""

    def __init__(self, threshold: float = 0.98):
        """
        Args:
            threshold: |r| above which two predictors count as near-duplicates
        """
        self.threshold = threshold
        self.alerts: List[DiversityAlert] = []

    def compare(
        self, predictions: Predictions
    ) -> Tuple[List[Dict[str, float]], List[DiversityAlert]]:
        """
        Pairwise feature and error correlations of the base predictors.

        Args:
            predictions: Depth maps and penultimate features on one evaluation set

        Returns:
            (rows for diversity.csv, alerts)
        """
        names = list(predictions.features)
        maps = {name: principal_maps(predictions.features[name]) for name in names}
        valid = predictions.mask.astype(bool)
        log_gt = np.log(np.where(valid, predictions.gt, 1.0))
        errors = {
            name: (np.log(np.maximum(predictions.depth[name], 1e-12)) - log_gt)[valid]
            for name in names
        }

        rows = []
        alerts = []
        for a, b in combinations(names, 2):
            feature_corr = pearson(maps[a], maps[b])
            error_corr = pearson(errors[a], errors[b])
            rows.append(
                {
                    "predictor_a": a,
                    "predictor_b": b,
                    "feature_corr": feature_corr,
                    "error_corr": error_corr,
                }
            )
            for issue, value in (
                (DiversityIssue.DUPLICATE_FEATURES, feature_corr),
                (DiversityIssue.DUPLICATE_ERRORS, error_corr),
            ):
                if not (np.isfinite(value) and abs(value) > self.threshold):
                    continue
                severe = abs(value) > (1 + self.threshold) / 2
                alerts.append(
                    DiversityAlert(
                        issue=issue,
                        severity="high" if severe else "medium",
                        message=f"{a} and {b} are near-duplicates ({issue.value}, r={value:.4f})",
                        metric_value=value,
                        threshold=self.threshold,
                        predictor_a=a,
                        predictor_b=b,
                    )
                )
        for alert in alerts:
            logger.warning(alert.message)
        self.alerts.extend(alerts)
        return rows, alerts

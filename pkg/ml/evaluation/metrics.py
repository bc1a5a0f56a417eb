from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import (
    mean_absolute_error,
    mean_absolute_percentage_error,
    mean_squared_error,
)

from ml.autodiff.tensor import Tensor
from ml.errors import EmptyMaskError, ShapeError

ArrayLike = Union[Tensor, np.ndarray]

METRIC_COLUMNS = ["abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "d1", "d2", "d3"]
REPORT_COLUMNS = METRIC_COLUMNS + ["cap_min", "cap_max", "valid_count"]
RANGE_COLUMNS = ["cap_min", "cap_max", "rmse", "rmse_std", "valid_count"]

MIN_EVAL_DEPTH = 1e-3


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    cap_min: float
    cap_max: float
    valid_count: int

    def as_row(self) -> Dict[str, float]:
        """Flat mapping in the metrics.csv column order."""
        values = asdict(self)
        for k in (1, 2, 3):
            values[f"d{k}"] = values.pop(f"delta{k}")
        return {column: values[column] for column in REPORT_COLUMNS}

    @classmethod
    def from_row(cls, row: Dict[str, float]) -> "MetricsReport":
        return cls(
            abs_rel=float(row["abs_rel"]),
            sq_rel=float(row["sq_rel"]),
            rmse=float(row["rmse"]),
            rmse_log=float(row["rmse_log"]),
            log10=float(row["log10"]),
            delta1=float(row["d1"]),
            delta2=float(row["d2"]),
            delta3=float(row["d3"]),
            cap_min=float(row["cap_min"]),
            cap_max=float(row["cap_max"]),
            valid_count=int(row["valid_count"]),
        )


def _as_array(x: ArrayLike) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else x
    return np.asarray(data, dtype=np.float64)


def _inputs(
    pred: ArrayLike, gt: ArrayLike, mask: Optional[ArrayLike]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    p, d = _as_array(pred), _as_array(gt)
    if mask is None:
        m = d > 0
    else:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    if p.shape != d.shape or m.shape != d.shape:
        raise ShapeError(
            f"Metric inputs differ in shape: pred {p.shape}, gt {d.shape}, mask {m.shape}"
        )
    return p, d, m


def clip_to_cap(
    pred: ArrayLike,
    gt: ArrayLike,
    cap: Tuple[float, float],
    mask: Optional[ArrayLike] = None,
    eps: float = MIN_EVAL_DEPTH,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Restrict a prediction to one depth range.

    Args:
        pred: Predicted depth
        gt: Ground-truth depth
        cap: (lo, hi); pixels with lo < gt <= hi are kept
        mask: Optional validity mask, defaults to gt > 0
        eps: Floor added to lo when clamping the prediction

    Returns:
        (pred', gt', mask') with pred' clamped into [lo + eps, hi] on kept pixels
    """
    lo, hi = float(cap[0]), float(cap[1])
    if not lo < hi:
        raise ValueError(f"Cap range must satisfy lo < hi, got ({lo}, {hi})")
    p, d, m = _inputs(pred, gt, mask)
    kept = m & (d > lo) & (d <= hi)
    clipped = np.where(kept, np.clip(p, lo + eps, hi), p)
    return clipped, d.copy(), kept


def compute_metrics(
    pred: ArrayLike,
    gt: ArrayLike,
    mask: Optional[ArrayLike] = None,
    cap: Tuple[float, float] = (0.0, 10.0),
    min_eval: float = MIN_EVAL_DEPTH,
) -> MetricsReport:
    """
    Standard depth metrics over pixels with cap[0] < gt <= cap[1].

    The prediction is clamped into [min_eval, cap[1]] first. Accuracy thresholds
    are strict: a pixel counts toward delta_k when max(p/d, d/p) < 1.25**k.
    """
    lo, hi = float(cap[0]), float(cap[1])
    p, d, m = _inputs(pred, gt, mask)
    valid = m & np.isfinite(d) & (d > lo) & (d <= hi)
    count = int(valid.sum())
    if count == 0:
        raise EmptyMaskError(f"No valid pixel inside the depth cap ({lo}, {hi}]")

    d = d[valid]
    p = np.clip(p[valid], min_eval, hi)

    ratio = np.maximum(p / d, d / p)
    deltas = [float(np.mean(ratio < 1.25**k)) for k in (1, 2, 3)]

    return MetricsReport(
        abs_rel=float(mean_absolute_percentage_error(d, p)),
        sq_rel=float(np.mean((p - d) ** 2 / d)),
        rmse=float(np.sqrt(mean_squared_error(d, p))),
        rmse_log=float(np.sqrt(mean_squared_error(np.log(d), np.log(p)))),
        log10=float(mean_absolute_error(np.log10(d), np.log10(p))),
        delta1=deltas[0],
        delta2=deltas[1],
        delta3=deltas[2],
        cap_min=lo,
        cap_max=hi,
        valid_count=count,
    )


def _per_image_rmse(clipped: np.ndarray, d: np.ndarray, kept: np.ndarray) -> List[float]:
    if kept.ndim < 3:
        clipped, d, kept = clipped[None], d[None], kept[None]
    return [
        float(np.sqrt(mean_squared_error(d[i][kept[i]], clipped[i][kept[i]])))
        for i in range(kept.shape[0])
        if kept[i].any()
    ]


def range_curve(
    pred: ArrayLike,
    gt: ArrayLike,
    mask: Optional[ArrayLike],
    caps: Sequence[float],
    min_depth: float = MIN_EVAL_DEPTH,
) -> List[Dict[str, float]]:
    """
    RMSE per depth band (min_depth, c1], (c1, c2], ...

    rmse pools every kept pixel; rmse_std is the spread of the per-image RMSE over images
    with at least one pixel in the band. Both are NaN for an empty band.
    """
    rows = []
    lower = float(min_depth)
    for upper in sorted(float(c) for c in caps):
        if upper <= lower:
            continue
        clipped, d, kept = clip_to_cap(pred, gt, (lower, upper), mask=mask)
        count = int(kept.sum())
        rmse = float(np.sqrt(mean_squared_error(d[kept], clipped[kept]))) if count else np.nan
        per_image = _per_image_rmse(clipped, d, kept)
        rows.append(
            {
                "cap_min": lower,
                "cap_max": upper,
                "rmse": rmse,
                "rmse_std": float(np.std(per_image)) if per_image else np.nan,
                "valid_count": count,
            }
        )
        lower = upper
    return rows

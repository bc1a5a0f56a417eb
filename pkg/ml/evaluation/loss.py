from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ml.autodiff import ops
from ml.autodiff.tensor import Tensor
from ml.config import SsiLossConfig
from ml.errors import DomainError, EmptyMaskError, ShapeError

ArrayLike = Union[Tensor, np.ndarray]


@dataclass
class LossBreakdown:
    loss: Tensor  # scalar, differentiable w.r.t. pred
    g_sq_mean: float
    g_mean: float
    valid_count: int

    @property
    def value(self) -> float:
        return self.loss.item()


def _values(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def ssi_loss(
    pred: Tensor,
    gt: ArrayLike,
    mask: ArrayLike,
    cfg: Optional[SsiLossConfig] = None,
) -> LossBreakdown:
    """
    Scaled scale-invariant loss over the log-depth residual g = ln(pred) - ln(gt).

    loss = alpha * sqrt(mean(g^2) - eta * mean(g)^2), evaluated on masked pixels only.
    The radicand is computed as var(g) + (1 - eta) * mean(g)^2 so it never goes
    negative through cancellation, and is clamped at 0 before the square root.

    Args:
        pred: Predicted depth (N, 1, H, W), differentiable
        gt: Ground-truth depth, same shape
        mask: Valid-pixel mask, same shape
        cfg: alpha and eta

    Returns:
        LossBreakdown with the scalar loss tensor and its diagnostics
    """
    cfg = cfg or SsiLossConfig()
    gt_np = _values(gt)
    mask_np = _values(mask).astype(bool)
    if gt_np.shape != pred.shape or mask_np.shape != pred.shape:
        raise ShapeError(
            f"ssi_loss needs matching shapes, got pred {pred.shape}, gt {gt_np.shape}, "
            f"mask {mask_np.shape}"
        )
    n = int(mask_np.sum())
    if n == 0:
        raise EmptyMaskError("ssi_loss: the valid-pixel mask is empty")
    bad = np.argwhere(mask_np & ~(gt_np > 0))
    if bad.size:
        raise DomainError("ssi_loss: ground-truth depth must be positive on masked pixels", bad[0])
    bad = np.argwhere(mask_np & ~(pred.data > 0))
    if bad.size:
        raise DomainError("ssi_loss: predicted depth must be positive on masked pixels", bad[0])

    dtype = pred.dtype
    m = Tensor(mask_np, dtype=dtype)
    # unmasked pixels become log(1) - 0 = 0
    pred_safe = ops.add(ops.mul(pred, m), ops.affine(m, -1.0, 1.0))
    log_gt = Tensor(np.where(mask_np, np.log(np.where(mask_np, gt_np, 1.0)), 0.0), dtype=dtype)
    g = ops.mul(ops.sub(ops.log(pred_safe), log_gt), m)

    g_mean = ops.scale(ops.reduce_sum(g), 1.0 / n)
    centered = ops.mul(ops.sub(g, ops.expand(g_mean, g.shape)), m)
    variance = ops.scale(ops.reduce_sum(ops.mul(centered, centered)), 1.0 / n)
    radicand = ops.add(variance, ops.scale(ops.mul(g_mean, g_mean), 1.0 - cfg.eta))
    loss = ops.scale(ops.sqrt(ops.clamp_min(radicand, 0.0)), cfg.alpha)

    residual = g.data[mask_np].astype(np.float64)
    return LossBreakdown(
        loss=loss,
        g_sq_mean=float(np.mean(residual * residual)),
        g_mean=float(np.mean(residual)),
        valid_count=n,
    )

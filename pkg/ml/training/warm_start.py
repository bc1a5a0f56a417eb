"""Least-squares start for a mixer's depth head."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.special import expit, logit
from sklearn.linear_model import Ridge

from data.samples import DepthSample, stack_samples
from ml.autodiff.ops import im2col_3x3
from ml.autodiff.tensor import no_grad
from ml.mixers.fusion import MixerModel, mixer_features, reset_fusion_to_average
from ml.predictors.toy import PredictorOutput

logger = logging.getLogger(__name__)

TARGET_MARGIN = 1e-3  # keeps logit targets finite at 0 and kappa
MIN_SLOPE = 1e-6
GAUSS_NEWTON_STEPS = 4


@dataclass
class HeadFit:
    weight: np.ndarray  # (1, Cin, 3, 3)
    bias: np.ndarray  # (1,)
    rmse: float  # over the fitted pixels
    step: int  # Gauss-Newton step that produced the kept solution


def head_design_matrix(fused: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """One row per valid pixel holding its 3x3 neighbourhood, columns in head weight order."""
    cols = im2col_3x3(fused)
    n, cin, _, _, h, w = cols.shape
    rows = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * h * w, cin * 9)
    return rows[valid.reshape(-1)]


def fit_depth_head(
    fused: np.ndarray,
    depth: np.ndarray,
    mask: np.ndarray,
    kappa: float,
    alpha: float = 1.0,
    steps: int = GAUSS_NEWTON_STEPS,
) -> HeadFit:
    """
    Fit kappa * sigmoid(conv3x3(F)) to ground-truth depth by damped least squares.

    The first solve regresses logit(depth / kappa) weighted by the sigmoid slope at the
    target; each further step re-linearizes around the current prediction. The solution
    with the lowest depth RMSE is kept.

    Args:
        fused: Fused maps F of shape (N, Cin, H, W)
        depth: Ground truth of shape (N, 1, H, W)
        mask: Valid-pixel mask of shape (N, 1, H, W)
        kappa: Depth scale of the head
        alpha: Ridge penalty on the conv weights
        steps: Gauss-Newton steps after the first solve

    Returns:
        HeadFit with the weight and bias of the head conv
    """
    valid = np.asarray(mask, dtype=bool) & (depth > 0)
    if not valid.any():
        raise ValueError("No valid pixel to fit the depth head on")
    x = head_design_matrix(np.asarray(fused, dtype=np.float64), valid)
    y = np.asarray(depth, dtype=np.float64)[valid]

    share = np.clip(y / kappa, TARGET_MARGIN, 1.0 - TARGET_MARGIN)
    response = logit(share)
    slope = kappa * share * (1.0 - share)
    model = Ridge(alpha=alpha)
    best = None
    for step in range(steps + 1):
        model.fit(x, response, sample_weight=slope**2)
        z = model.predict(x)
        pred = kappa * expit(z)
        rmse = float(np.sqrt(np.mean((pred - y) ** 2)))
        if best is None or rmse < best.rmse:
            best = HeadFit(
                weight=model.coef_.reshape(1, -1, 3, 3).copy(),
                bias=np.array([model.intercept_], dtype=np.float64),
                rmse=rmse,
                step=step,
            )
        slope = np.maximum(pred * (1.0 - pred / kappa), MIN_SLOPE)
        response = z + (y - pred) / slope
    return best


def fused_batch(
    mixer: MixerModel, cache: Sequence[List[PredictorOutput]], indices: Sequence[int]
) -> np.ndarray:
    """Fused maps of cached predictor outputs, one sample at a time."""
    with no_grad():
        return np.concatenate([mixer_features(mixer, cache[i]).data for i in indices])


def warm_start_mixer(
    mixer: MixerModel,
    cache: Sequence[List[PredictorOutput]],
    samples: Sequence[DepthSample],
    indices: Sequence[int],
    alpha: float = 1.0,
) -> HeadFit:
    """Reset the fusion to an average and fit the head on samples[indices]."""
    reset_fusion_to_average(mixer)
    _, depth, mask = stack_samples([samples[i] for i in indices])
    fit = fit_depth_head(fused_batch(mixer, cache, indices), depth, mask, mixer.kappa, alpha)
    for name, value in (("head.weight", fit.weight), ("head.bias", fit.bias)):
        tensor = mixer.params[name]
        tensor.data = value.reshape(tensor.shape).astype(tensor.dtype)
    logger.info(
        "mixer_%s head fitted on %d samples: rmse %.4f after %d steps",
        mixer.kind.value,
        len(indices),
        fit.rmse,
        fit.step,
    )
    return fit

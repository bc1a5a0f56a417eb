from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from data.samples import DepthSample, stack_samples
from ml.autodiff.tensor import Tensor, no_grad
from ml.config import ExperimentConfig
from ml.evaluation.metrics import MetricsReport, compute_metrics, range_curve
from ml.mixers.fusion import MixerModel, mixer_forward, mixer_macs
from ml.predictors.toy import BasePredictorModel, PredictorOutput, predictor_macs


@dataclass
class Predictions:
    """Depth maps of every model over one evaluation set, stacked as (N, 1, H, W)."""

    gt: np.ndarray
    mask: np.ndarray
    depth: Dict[str, np.ndarray] = field(default_factory=dict)
    features: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return list(self.depth)


def predictor_name(index: int) -> str:
    return f"predictor_{index}"


def mixer_name(mixer: MixerModel) -> str:
    return f"mixer_{mixer.kind.value}"


def predictor_outputs(
    models: Sequence[BasePredictorModel], rgb: np.ndarray
) -> List[PredictorOutput]:
    with no_grad():
        batch = Tensor(rgb)
        return [model.forward(batch) for model in models]


def ensemble_depth(
    models: Sequence[BasePredictorModel],
    mixer: MixerModel,
    rgb: np.ndarray,
    subset: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Run the frozen predictors and the mixer on an (N, 3, H, W) batch."""
    subset = list(range(len(models))) if subset is None else list(subset)
    outputs = predictor_outputs([models[i] for i in subset], rgb)
    with no_grad():
        return mixer_forward(mixer, outputs).data


def collect_predictions(
    models: Sequence[BasePredictorModel],
    mixer: Optional[MixerModel],
    samples: Sequence[DepthSample],
    subset: Optional[Sequence[int]] = None,
    batch_size: int = 8,
) -> Predictions:
    """Predicted depth (and penultimate features) of every model on every sample."""
    subset = list(range(len(models))) if subset is None else list(subset)
    _, gt, mask = stack_samples(samples)
    depth: Dict[str, List[np.ndarray]] = {predictor_name(i): [] for i in range(len(models))}
    features: Dict[str, List[np.ndarray]] = {predictor_name(i): [] for i in range(len(models))}
    if mixer is not None:
        depth[mixer_name(mixer)] = []
    for start in range(0, len(samples), batch_size):
        rgb, _, _ = stack_samples(samples[start : start + batch_size])
        outputs = predictor_outputs(models, rgb)
        for i, out in enumerate(outputs):
            depth[predictor_name(i)].append(out.depth.data)
            features[predictor_name(i)].append(out.features.data)
        if mixer is not None:
            with no_grad():
                fused = mixer_forward(mixer, [outputs[i] for i in subset])
            depth[mixer_name(mixer)].append(fused.data)
    return Predictions(
        gt=gt,
        mask=mask,
        depth={name: np.concatenate(parts) for name, parts in depth.items()},
        features={name: np.concatenate(parts) for name, parts in features.items()},
    )


def evaluate_models(
    models: Sequence[BasePredictorModel],
    mixer: Optional[MixerModel],
    samples: Sequence[DepthSample],
    cfg: ExperimentConfig,
    subset: Optional[Sequence[int]] = None,
    predictions: Optional[Predictions] = None,
) -> Dict[str, MetricsReport]:
    """
    One MetricsReport per base predictor and one for the mixer.

    Returns:
        Ordered mapping predictor_0..predictor_{K-1}, then mixer_<kind>
    """
    predictions = predictions or collect_predictions(models, mixer, samples, subset)
    cap = cfg.eval_cap()
    return {
        name: compute_metrics(
            depth, predictions.gt, predictions.mask, cap=cap, min_eval=cfg.eval.min_depth
        )
        for name, depth in predictions.depth.items()
    }


def range_rows(predictions: Predictions, caps: Sequence[float], min_depth: float) -> List[dict]:
    """Per-model, per-depth-band RMSE rows."""
    rows = []
    for name, depth in predictions.depth.items():
        for row in range_curve(depth, predictions.gt, predictions.mask, caps, min_depth):
            rows.append({"model": name, **row})
    return rows


def model_cost(model, height: int, width: int) -> Dict[str, int]:
    """Parameter count and per-image multiply-accumulates of a predictor or mixer."""
    if isinstance(model, MixerModel):
        return {"params": model.params.count(), "macs": mixer_macs(model, height, width)}
    return {"params": model.params.count(), "macs": predictor_macs(model, height, width)}

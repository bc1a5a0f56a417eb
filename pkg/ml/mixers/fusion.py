from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ml.autodiff import ops
from ml.autodiff.parameters import ParameterSet
from ml.autodiff.tensor import Tensor
from ml.config import FusionLocation, MixerConfig, MixerKind
from ml.errors import ShapeError
from ml.predictors.toy import PredictorOutput, conv_macs, init_conv, sigmoid_depth_head


@dataclass
class MixerModel:
    kind: MixerKind
    params: ParameterSet
    kappa: float
    fusion_location: FusionLocation = FusionLocation.PENULTIMATE
    order: List[int] = field(default_factory=list)
    num_predictors: int = 1
    channels: int = 1  # C_f for penultimate fusion, 1 for final-layer fusion
    average: bool = False

    def fusion_param_count(self) -> int:
        return sum(t.size for name, t in self.params.items() if not name.startswith("head."))

    def head_param_count(self) -> int:
        return self.params.count() - self.fusion_param_count()


@dataclass
class FusionState:
    """One step of the ranked ConvGRU."""

    step: int
    predictor: int
    h: Tensor
    z: Tensor
    s: Tensor
    h_tilde: Tensor


@dataclass
class ConfidenceMap:
    values: Tensor  # (N, C, H, W), sigmoid output


def check_permutation(order: Sequence[int], k: int) -> List[int]:
    order = [int(i) for i in order]
    if sorted(order) != list(range(k)):
        raise ValueError(f"order {order} is not a permutation of 0..{k - 1}")
    return order


def build_mixer(
    cfg: MixerConfig,
    num_predictors: int,
    feature_channels: int,
    kappa: float,
    order: Optional[Sequence[int]] = None,
    seed: int = 0,
) -> MixerModel:
    """
    Create the parameter layout of one mixer kind.

    Args:
        cfg: Mixer kind, fusion location and averaging flag
        num_predictors: K, the number of fused predictors
        feature_channels: C_f of the base predictors
        kappa: Depth scale of the final head
        order: Fusion order for RBF (worst predictor first)
        seed: Initialization seed

    Returns:
        MixerModel with freshly initialized parameters
    """
    if num_predictors < 1:
        raise ValueError("A mixer needs at least one predictor")
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    kind = MixerKind(cfg.kind)
    location = FusionLocation(cfg.location)
    c = feature_channels if location is FusionLocation.PENULTIMATE else 1
    k = num_predictors
    if order is None:
        if kind is MixerKind.RBF:
            raise ValueError("The ranking-based mixer needs a predictor order")
        order = list(range(k))
    order = check_permutation(order, k)

    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    params = ParameterSet()
    head_in = c
    if kind is MixerKind.CGF:
        for i in range(k):
            init_conv(params, f"confidence{i}", c, c, rng)
    elif kind is MixerKind.CBF:
        init_conv(params, "concat", k * c, c, rng)
    elif kind is MixerKind.RBF:
        for gate in ("gru_z", "gru_s", "gru_h"):
            init_conv(params, gate, 2 * c, c, rng)
        head_in = k * c
    init_conv(params, "head", head_in, 1, rng)
    return MixerModel(
        kind=kind,
        params=params,
        kappa=float(kappa),
        fusion_location=location,
        order=order,
        num_predictors=k,
        channels=c,
        average=bool(cfg.average),
    )


def _check_features(features: Sequence[Tensor]) -> None:
    if not features:
        raise ShapeError("Fusion needs at least one feature map")
    for f in features:
        if f.shape != features[0].shape:
            raise ShapeError(f"Feature maps differ in shape: {features[0].shape} vs {f.shape}")


def fuse_uniform(features: Sequence[Tensor], average: bool = False) -> Tensor:
    """F = sum_i f_i (divided by K when average is set)."""
    _check_features(features)
    fused = ops.add_n(list(features))
    if average and len(features) > 1:
        fused = ops.scale(fused, 1.0 / len(features))
    return fused


def confidence_maps(features: Sequence[Tensor], mixer: MixerModel) -> List[ConfidenceMap]:
    maps = []
    for i, f in enumerate(features):
        name = f"confidence{i}"
        if f"{name}.weight" not in mixer.params or f"{name}.bias" not in mixer.params:
            raise ShapeError(f"Mixer has no confidence conv for predictor slot {i}")
        logits = ops.conv2d_3x3(f, mixer.params[f"{name}.weight"], mixer.params[f"{name}.bias"])
        maps.append(ConfidenceMap(values=ops.sigmoid(logits)))
    return maps


def fuse_confidence(features: Sequence[Tensor], mixer: MixerModel) -> Tensor:
    """F = sum_i C_i * f_i with C_i = sigmoid(conv_i(f_i))."""
    _check_features(features)
    weighted = [ops.mul(c.values, f) for c, f in zip(confidence_maps(features, mixer), features)]
    return fuse_uniform(weighted)


def fuse_concat(features: Sequence[Tensor], mixer: MixerModel) -> Tensor:
    """F = ELU(conv([f_1, ..., f_K]))."""
    _check_features(features)
    stacked = ops.concat_channels(list(features))
    fused = ops.conv2d_3x3(stacked, mixer.params["concat.weight"], mixer.params["concat.bias"])
    return ops.elu(fused)


def rank_predictors(rmse_per_predictor: Sequence[float]) -> List[int]:
    """Predictor indices from worst (highest RMSE) to best; ties by ascending index."""
    values = [float(v) for v in rmse_per_predictor]
    for i, v in enumerate(values):
        if math.isnan(v):
            raise ValueError(f"RMSE of predictor {i} is NaN")
    return sorted(range(len(values)), key=lambda i: (-values[i], i))


def _gru_conv(mixer: MixerModel, gate: str, x: Tensor) -> Tensor:
    return ops.conv2d_3x3(x, mixer.params[f"{gate}.weight"], mixer.params[f"{gate}.bias"])


def fusion_state_trace(features: Sequence[Tensor], mixer: MixerModel) -> List[FusionState]:
    """Run the ranked ConvGRU over features in mixer.order, starting from h0 = 0."""
    _check_features(features)
    order = check_permutation(mixer.order, len(features))
    h = Tensor(np.zeros_like(features[0].data))
    states = []
    for step, index in enumerate(order):
        f = features[index]
        hf = ops.concat_channels([h, f])
        z = ops.sigmoid(_gru_conv(mixer, "gru_z", hf))
        s = ops.sigmoid(_gru_conv(mixer, "gru_s", hf))
        h_tilde = ops.tanh(_gru_conv(mixer, "gru_h", ops.concat_channels([ops.mul(s, h), f])))
        h = ops.add(ops.mul(ops.affine(z, -1.0, 1.0), h), ops.mul(z, h_tilde))
        states.append(FusionState(step=step, predictor=index, h=h, z=z, s=s, h_tilde=h_tilde))
    return states


def fuse_ranked_gru(features: Sequence[Tensor], mixer: MixerModel) -> Tensor:
    """F = [h_1, ..., h_K], the hidden states of every fusion step stacked on channels."""
    return ops.concat_channels([state.h for state in fusion_state_trace(features, mixer)])


def depth_head(fused: Tensor, mixer: MixerModel) -> Tensor:
    """d = kappa * sigmoid(conv3x3(F)), strictly inside (0, kappa)."""
    return sigmoid_depth_head(
        fused, mixer.params["head.weight"], mixer.params["head.bias"], mixer.kappa
    )


def fuse(features: Sequence[Tensor], mixer: MixerModel) -> Tensor:
    if mixer.kind is MixerKind.UWF:
        return fuse_uniform(features, average=mixer.average)
    if mixer.kind is MixerKind.CGF:
        return fuse_confidence(features, mixer)
    if mixer.kind is MixerKind.CBF:
        return fuse_concat(features, mixer)
    return fuse_ranked_gru(features, mixer)


def mixer_features(mixer: MixerModel, predictor_outputs: Sequence[PredictorOutput]) -> Tensor:
    """Fused map F of K predictors' penultimate features (or final depth maps)."""
    if len(predictor_outputs) != mixer.num_predictors:
        raise ShapeError(
            f"Mixer was built for {mixer.num_predictors} predictors, got {len(predictor_outputs)}"
        )
    if mixer.fusion_location is FusionLocation.PENULTIMATE:
        inputs = [out.features for out in predictor_outputs]
    else:
        inputs = [out.depth for out in predictor_outputs]
    if inputs[0].shape[1] != mixer.channels:
        raise ShapeError(
            f"Mixer expects {mixer.channels}-channel inputs, got {inputs[0].shape[1]} channels"
        )
    return fuse(inputs, mixer)


def mixer_forward(mixer: MixerModel, predictor_outputs: Sequence[PredictorOutput]) -> Tensor:
    """Fuse penultimate features (or final depth maps) of K predictors into one depth map."""
    return depth_head(mixer_features(mixer, predictor_outputs), mixer)


def reset_fusion_to_average(mixer: MixerModel) -> None:
    """
    Set fusion parameters so F starts as a plain combination of the inputs.

    CGF gates become 0.5 everywhere, CBF computes ELU of the channel-wise mean over
    predictors. UWF has nothing to reset; the ConvGRU keeps its random start.
    """
    c, k = mixer.channels, mixer.num_predictors
    if mixer.kind is MixerKind.CGF:
        for i in range(k):
            for part in ("weight", "bias"):
                tensor = mixer.params[f"confidence{i}.{part}"]
                tensor.data = np.zeros_like(tensor.data)
    elif mixer.kind is MixerKind.CBF:
        weight = mixer.params["concat.weight"]
        centre = np.zeros_like(weight.data)
        for i in range(k):
            centre[np.arange(c), i * c + np.arange(c), 1, 1] = 1.0 / k
        weight.data = centre
        bias = mixer.params["concat.bias"]
        bias.data = np.zeros_like(bias.data)


def mixer_macs(mixer: MixerModel, height: int, width: int) -> int:
    """Multiply-accumulates of the mixer's 3x3 convs for one image."""
    c, k = mixer.channels, mixer.num_predictors
    if mixer.kind is MixerKind.UWF:
        fusion = 0
    elif mixer.kind is MixerKind.CGF:
        fusion = k * conv_macs(c, c, height, width)
    elif mixer.kind is MixerKind.CBF:
        fusion = conv_macs(k * c, c, height, width)
    else:
        fusion = k * 3 * conv_macs(2 * c, c, height, width)
    head_in = k * c if mixer.kind is MixerKind.RBF else c
    return fusion + conv_macs(head_in, 1, height, width)

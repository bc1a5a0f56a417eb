from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ml.autodiff import ops
from ml.autodiff.parameters import ParameterSet
from ml.autodiff.tensor import Tensor
from ml.config import PredictorArch
from ml.errors import ShapeError


@dataclass
class PredictorOutput:
    """What one base predictor hands to the mixer."""

    features: Tensor  # (N, C_f, H, W), penultimate layer
    depth: Tensor  # (N, 1, H, W), in (0, kappa)


@dataclass
class BasePredictorModel:
    params: ParameterSet
    arch: PredictorArch
    feature_channels: int
    kappa: float
    seed: int

    def forward(self, rgb: Tensor) -> PredictorOutput:
        features = forward_features(self, rgb)
        return PredictorOutput(features=features, depth=depth_from_features(self, features))

    def layer_shapes(self) -> List[Tuple[int, int]]:
        return layer_channels(self.arch, self.feature_channels)


def layer_channels(arch: PredictorArch, feature_channels: int) -> List[Tuple[int, int]]:
    """(Cin, Cout) of every conv: blocks, penultimate, head."""
    shapes = []
    cin = 3
    for _ in range(arch.depth):
        shapes.append((cin, arch.width))
        cin = arch.width
    shapes.append((cin, feature_channels))
    shapes.append((feature_channels, 1))
    return shapes


def init_conv(
    params: ParameterSet, name: str, cin: int, cout: int, rng: np.random.Generator
) -> None:
    """Uniform(-b, b) weights and biases with b = sqrt(1 / fan_in)."""
    bound = float(np.sqrt(1.0 / (cin * 9)))
    weight = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
    bias = rng.uniform(-bound, bound, size=(cout,))
    params.add(f"{name}.weight", Tensor(weight, requires_grad=True))
    params.add(f"{name}.bias", Tensor(bias, requires_grad=True))


def _layer_names(arch: PredictorArch) -> List[str]:
    return [f"block{i}" for i in range(arch.depth)] + ["penultimate", "head"]


def build_toy_predictor(
    arch: PredictorArch, feature_channels: int = 8, kappa: float = 10.0, seed: int = 0
) -> BasePredictorModel:
    """
    Build a dilated-conv stack whose parameters are a pure function of (arch, seed).

    Args:
        arch: Block count, width, per-block dilation and activation
        feature_channels: Channels C_f of the penultimate layer
        kappa: Depth scale of the sigmoid head
        seed: 64-bit initialization seed

    Returns:
        BasePredictorModel with freshly initialized parameters
    """
    if feature_channels < 1:
        raise ValueError(f"feature_channels must be >= 1, got {feature_channels}")
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    params = ParameterSet()
    for name, (cin, cout) in zip(_layer_names(arch), layer_channels(arch, feature_channels)):
        init_conv(params, name, cin, cout, rng)
    return BasePredictorModel(
        params=params, arch=arch, feature_channels=feature_channels, kappa=kappa, seed=int(seed)
    )


def forward_features(model: BasePredictorModel, rgb: Tensor) -> Tensor:
    """Penultimate-layer activations of shape (N, C_f, H, W)."""
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ShapeError(f"Predictor input must be (N, 3, H, W), got {rgb.shape}")
    x = rgb
    p = model.params
    for i, dilation in enumerate(model.arch.dilations()):
        x = ops.conv2d_3x3(x, p[f"block{i}.weight"], p[f"block{i}.bias"], dilation=dilation)
        x = ops.activation(model.arch.activation, x)
    x = ops.conv2d_3x3(x, p["penultimate.weight"], p["penultimate.bias"])
    return ops.activation(model.arch.activation, x)


def sigmoid_depth_head(features: Tensor, weight: Tensor, bias: Tensor, kappa: float) -> Tensor:
    """kappa * sigmoid(conv3x3(features)), kept strictly inside (0, kappa)."""
    logits = ops.conv2d_3x3(features, weight, bias)
    depth = ops.scale(ops.sigmoid(logits), kappa)
    # sigmoid saturates to exactly 0 or 1 in floating point
    margin = float(np.finfo(depth.dtype).eps) * kappa
    return ops.clamp(depth, margin, kappa - margin)


def depth_from_features(model: BasePredictorModel, features: Tensor) -> Tensor:
    p = model.params
    return sigmoid_depth_head(features, p["head.weight"], p["head.bias"], model.kappa)


def forward_depth(model: BasePredictorModel, rgb: Tensor) -> Tensor:
    return depth_from_features(model, forward_features(model, rgb))


def conv_macs(cin: int, cout: int, height: int, width: int) -> int:
    """Multiply-accumulates of one 3x3 conv over an H x W map (one image)."""
    return cin * cout * 9 * height * width


def predictor_macs(model: BasePredictorModel, height: int, width: int) -> int:
    return sum(conv_macs(cin, cout, height, width) for cin, cout in model.layer_shapes())

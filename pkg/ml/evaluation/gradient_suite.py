from __future__ import annotations

import dataclasses
import logging
from typing import Dict, List, Sequence

import numpy as np

from ml.autodiff import ops
from ml.autodiff.gradcheck import GradCheckReport, grad_check
from ml.autodiff.parameters import ParameterSet
from ml.autodiff.tensor import Tensor, precision
from ml.config import FusionLocation, MixerConfig, MixerKind, SsiLossConfig
from ml.evaluation.loss import ssi_loss
from ml.mixers.fusion import MixerModel, build_mixer, depth_head, mixer_forward
from ml.predictors.toy import PredictorOutput

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = tuple(range(10))

_N, _C, _H, _W, _K = 1, 2, 4, 4, 2


def _weighted_sum(y: Tensor, weights: Tensor) -> Tensor:
    # random weights keep the checked gradient from being trivially uniform
    return ops.reduce_sum(ops.mul(y, weights))


def _with_param(mixer: MixerModel, name: str, value: Tensor) -> MixerModel:
    params = ParameterSet()
    for key, tensor in mixer.params.items():
        params.add(key, value if key == name else tensor)
    return dataclasses.replace(mixer, params=params)


def _op_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    x = rng.normal(size=(_N, _C, _H, _W))
    positive = rng.uniform(0.5, 2.0, size=x.shape)
    other = Tensor(rng.normal(size=x.shape))
    w = Tensor(rng.normal(size=x.shape))
    weight = Tensor(rng.normal(size=(3, _C, 3, 3)))
    bias = Tensor(rng.normal(size=(3,)))
    w_conv = Tensor(rng.normal(size=(_N, 3, _H, _W)))
    w_cat = Tensor(rng.normal(size=(_N, 2 * _C, _H, _W)))
    inputs = Tensor(x)

    cases = {
        "conv2d_3x3.input": (
            lambda t: _weighted_sum(ops.conv2d_3x3(t, weight, bias), w_conv),
            x,
        ),
        "conv2d_3x3.input.dilated": (
            lambda t: _weighted_sum(ops.conv2d_3x3(t, weight, bias, dilation=2), w_conv),
            x,
        ),
        "conv2d_3x3.weight": (
            lambda t: _weighted_sum(ops.conv2d_3x3(inputs, t, bias), w_conv),
            weight.data,
        ),
        "conv2d_3x3.bias": (
            lambda t: _weighted_sum(ops.conv2d_3x3(inputs, weight, t), w_conv),
            bias.data,
        ),
        "add": (lambda t: _weighted_sum(ops.add(t, other), w), x),
        "add_n": (lambda t: _weighted_sum(ops.add_n([other, t, t]), w), x),
        "mul": (lambda t: _weighted_sum(ops.mul(t, other), w), x),
        "scale": (lambda t: _weighted_sum(ops.scale(t, -1.7), w), x),
        "log": (lambda t: _weighted_sum(ops.log(t), w), positive),
        "sqrt": (lambda t: _weighted_sum(ops.sqrt(t), w), positive),
        "reduce.sum": (lambda t: ops.reduce_sum(ops.mul(t, t)), x),
        "reduce.mean": (lambda t: ops.reduce_mean(ops.mul(t, t)), x),
        "concat_channels": (
            lambda t: _weighted_sum(ops.concat_channels([t, other]), w_cat),
            x,
        ),
        "slice_channels": (
            lambda t: _weighted_sum(ops.slice_channels(ops.concat_channels([other, t]), 2, 4), w),
            x,
        ),
    }
    for kind in ops.ActivationKind:
        cases[kind.value] = (
            lambda t, kind=kind: _weighted_sum(ops.activation(kind, t), w),
            x,
        )
    return cases


def _mixer_cases(rng: np.random.Generator, seed: int) -> Dict[str, tuple]:
    cases = {}
    features = [rng.normal(size=(_N, _C, _H, _W)) for _ in range(_K)]
    depths = [rng.uniform(0.5, 9.5, size=(_N, 1, _H, _W)) for _ in range(_K)]
    w = Tensor(rng.normal(size=(_N, 1, _H, _W)))

    for kind in MixerKind:
        for location in FusionLocation:
            cfg = MixerConfig(kind=kind, location=location)
            mixer = build_mixer(cfg, _K, _C, kappa=10.0, order=[1, 0], seed=seed)
            fixed = [
                PredictorOutput(features=Tensor(f), depth=Tensor(d))
                for f, d in zip(features, depths)
            ]
            penultimate = location is FusionLocation.PENULTIMATE

            def through_input(t, mixer=mixer, fixed=fixed, penultimate=penultimate):
                first = PredictorOutput(
                    features=t if penultimate else fixed[0].features,
                    depth=fixed[0].depth if penultimate else t,
                )
                return _weighted_sum(mixer_forward(mixer, [first] + fixed[1:]), w)

            point = features[0] if penultimate else depths[0]
            cases[f"mixer.{kind.value}.{location.value}.input"] = (through_input, point)

            for name, tensor in mixer.params.items():
                if name.endswith(".weight"):
                    cases[f"mixer.{kind.value}.{location.value}.{name}"] = (
                        lambda t, mixer=mixer, name=name, fixed=fixed: _weighted_sum(
                            mixer_forward(_with_param(mixer, name, t), fixed), w
                        ),
                        tensor.data,
                    )

    head_mixer = build_mixer(MixerConfig(kind=MixerKind.UWF), _K, _C, kappa=10.0, seed=seed)
    cases["depth_head"] = (
        lambda t: _weighted_sum(depth_head(t, head_mixer), w),
        features[0],
    )
    return cases


def _loss_case(rng: np.random.Generator) -> Dict[str, tuple]:
    gt = rng.uniform(1.0, 9.0, size=(2, 1, _H, _W))
    pred = gt * np.exp(rng.normal(scale=0.3, size=gt.shape))
    mask = rng.random(gt.shape) < 0.8
    mask.flat[0] = True
    cfg = SsiLossConfig()
    return {"ssi_loss": (lambda t: ssi_loss(t, gt, mask, cfg).loss, pred)}


def run_gradcheck_suite(
    seeds: Sequence[int] = DEFAULT_SEEDS, eps: float = 1e-5, tol: float = 1e-4
) -> List[GradCheckReport]:
    """
    Gradient-check every differentiable operation, mixer and the loss over several seeds.

    Returns:
        One GradCheckReport per (check, seed), named `<check>@<seed>`
    """
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6772]))
        with precision(np.float64):
            cases: Dict[str, tuple] = {}
            cases.update(_op_cases(rng))
            cases.update(_mixer_cases(rng, seed))
            cases.update(_loss_case(rng))
            for name, (f, point) in cases.items():
                report = grad_check(
                    f, Tensor(point), eps=eps, tol=tol, name=f"{name}@{seed}"
                )
                if not report.passed:
                    logger.warning(
                        "%s failed: relative error %.3g", report.name, report.max_rel_error
                    )
                reports.append(report)
    return reports


def suite_passed(reports: Sequence[GradCheckReport]) -> bool:
    return bool(reports) and all(r.passed for r in reports)

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from data.augmentation import augment_sample
from data.samples import DepthSample, select, stack_samples
from data.splits import DatasetSplit
from ml.autodiff.parameters import ParameterSet
from ml.autodiff.tensor import Tensor, backward, default_dtype, no_grad, precision
from ml.config import ExperimentConfig, MixerConfig, MixerKind, PredictorArch
from ml.errors import TrainingDivergedError
from ml.evaluation.evaluate import ensemble_depth
from ml.evaluation.loss import ssi_loss
from ml.evaluation.metrics import MetricsReport, compute_metrics
from ml.mixers.fusion import (
    MixerModel,
    build_mixer,
    check_permutation,
    mixer_forward,
    rank_predictors,
)
from ml.predictors.toy import BasePredictorModel, PredictorOutput, build_toy_predictor
from ml.training.optimizer import OptimizerState, adamw_step
from ml.training.warm_start import warm_start_mixer

logger = logging.getLogger(__name__)

MIXER_STREAM = 2**32  # outside the range of predictor indices


@dataclass
class TrainedPredictor:
    index: int
    model: BasePredictorModel
    loss_history: List[float]  # epoch means
    initial_loss: float
    final_loss: float
    val_rmse: float


@dataclass
class TrainedMixer:
    mixer: MixerModel
    subset: List[int]
    loss_history: List[float]
    initial_loss: float
    final_loss: float
    predictor_digests: List[str] = field(default_factory=list)
    selected_epoch: int = 0  # 0 keeps the starting parameters
    holdout_rmse: float = float("nan")
    test_report: Optional[MetricsReport] = None


def task_seed(seed: int, stream: int) -> int:
    """64-bit seed of one training task, independent of the order tasks run in."""
    state = np.random.SeedSequence([int(seed), int(stream)]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def stack_batch(samples: Sequence[DepthSample]) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    rgb, depth, mask = stack_samples(samples)
    return Tensor(rgb), depth, mask


def iterate_batches(count: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Epoch-wise shuffled index batches; the last batch may be short."""
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


def total_steps(count: int, epochs: int, batch_size: int) -> int:
    return epochs * math.ceil(count / batch_size)


def _check_finite(task: str, value: float) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(task, f"loss became {value}")


def predictor_loss(
    model: BasePredictorModel, samples: Sequence[DepthSample], cfg: ExperimentConfig
) -> float:
    """Mean SSI loss of one predictor over fixed batches, without recording gradients."""
    losses = []
    with no_grad():
        for start in range(0, len(samples), cfg.train.batch_size):
            rgb, depth, mask = stack_batch(samples[start : start + cfg.train.batch_size])
            losses.append(ssi_loss(model.forward(rgb).depth, depth, mask, cfg.train.loss).value)
    return float(np.mean(losses))


def predictor_rmse(
    model: BasePredictorModel, samples: Sequence[DepthSample], cfg: ExperimentConfig
) -> float:
    rgb, depth, mask = stack_batch(samples)
    with no_grad():
        pred = model.forward(rgb).depth
    return compute_metrics(pred, depth, mask, cap=cfg.eval_cap(), min_eval=cfg.eval.min_depth).rmse


def train_single_predictor(
    index: int,
    arch: PredictorArch,
    base_samples: Sequence[DepthSample],
    val_samples: Sequence[DepthSample],
    cfg: ExperimentConfig,
    dtype: Optional[str] = None,
) -> TrainedPredictor:
    """
    Train one base predictor in isolation on D_train_base.

    Args:
        index: Predictor slot; with cfg.train.seed it fixes the task's random stream
        arch: Architecture of this predictor
        base_samples: D_train_base
        val_samples: D_train_mixer, used for the validation RMSE that ranks predictors
        cfg: Experiment configuration
        dtype: Tensor precision of the task (defaults to the caller's)

    Returns:
        TrainedPredictor with loss history and validation RMSE
    """
    with precision(dtype or default_dtype()):
        task = f"predictor_{index}"
        seed = task_seed(cfg.train.seed, index)
        model = build_toy_predictor(
            arch, cfg.model.feature_channels, cfg.model.kappa, seed=seed
        )
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        train = cfg.train
        state = OptimizerState.from_config(
            train, total_steps(len(base_samples), train.epochs, train.batch_size)
        )

        initial = predictor_loss(model, base_samples, cfg)
        _check_finite(task, initial)
        history = []
        for epoch in range(train.epochs):
            losses = []
            lr = 0.0
            for batch_index in iterate_batches(len(base_samples), train.batch_size, rng):
                batch = [augment_sample(base_samples[i], cfg.augment, rng) for i in batch_index]
                rgb, depth, mask = stack_batch(batch)
                model.params.zero_grad()
                loss = ssi_loss(model.forward(rgb).depth, depth, mask, train.loss)
                _check_finite(task, loss.value)
                backward(loss.loss)
                lr = adamw_step(model.params, state)
                losses.append(loss.value)
            history.append(float(np.mean(losses)))
            logger.info(
                "%s epoch %d/%d loss %.5f lr %.3g", task, epoch + 1, train.epochs, history[-1], lr
            )
        model.params.zero_grad()

        final = predictor_loss(model, base_samples, cfg)
        _check_finite(task, final)
        val_rmse = predictor_rmse(model, val_samples, cfg) if val_samples else float("nan")
        logger.info("%s finished: loss %.5f -> %.5f, val RMSE %.4f", task, initial, final, val_rmse)
        return TrainedPredictor(
            index=index,
            model=model,
            loss_history=history,
            initial_loss=initial,
            final_loss=final,
            val_rmse=val_rmse,
        )


def _train_task(args) -> TrainedPredictor:
    return train_single_predictor(*args)


def train_base_predictors(
    split: DatasetSplit,
    samples: Sequence[DepthSample],
    archs: Sequence[PredictorArch],
    cfg: ExperimentConfig,
    jobs: int = 1,
) -> List[TrainedPredictor]:
    """
    Train K base predictors independently on the base split.

    Tasks share nothing; with jobs > 1 they run in separate processes.
    """
    if not archs:
        raise ValueError("At least one predictor architecture is required")
    base = select(samples, split.train_base)
    val = select(samples, split.train_mixer)
    if not base:
        raise ValueError("The base training split is empty")
    dtype = default_dtype().name
    tasks = [(i, arch, base, val, cfg, dtype) for i, arch in enumerate(archs)]
    logger.info("Training %d base predictors on %d samples (jobs=%d)", len(tasks), len(base), jobs)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_train_task, tasks))
    return [_train_task(task) for task in tasks]


def validation_rmse(
    models: Sequence[BasePredictorModel], samples: Sequence[DepthSample], cfg: ExperimentConfig
) -> List[float]:
    return [predictor_rmse(model, samples, cfg) for model in models]


def resolve_subset(mixer_cfg: MixerConfig, num_models: int) -> List[int]:
    subset = list(range(num_models)) if not mixer_cfg.subset else [int(i) for i in mixer_cfg.subset]
    in_range = all(0 <= i < num_models for i in subset)
    if not subset or len(set(subset)) != len(subset) or not in_range:
        raise ValueError(f"Invalid predictor subset {subset} for {num_models} predictors")
    return subset


def resolve_order(
    mixer_cfg: MixerConfig, subset: Sequence[int], val_rmse: Optional[Sequence[float]]
) -> Optional[List[int]]:
    """Fusion order over subset positions: explicit, or worst-to-best validation RMSE."""
    if MixerKind(mixer_cfg.kind) is not MixerKind.RBF:
        return None
    if mixer_cfg.order:
        return check_permutation(mixer_cfg.order, len(subset))
    if val_rmse is None:
        return None
    return rank_predictors([val_rmse[i] for i in subset])


def cached_outputs(
    models: Sequence[BasePredictorModel], samples: Sequence[DepthSample]
) -> List[List[PredictorOutput]]:
    """Frozen predictor outputs per sample, one PredictorOutput per model, batch size 1."""
    cache = []
    with no_grad():
        for sample in samples:
            rgb, _, _ = stack_batch([sample])
            cache.append([model.forward(rgb) for model in models])
    return cache


def _batch_outputs(
    cache: Sequence[List[PredictorOutput]], indices: Sequence[int]
) -> List[PredictorOutput]:
    outputs = []
    for k in range(len(cache[indices[0]])):
        outputs.append(
            PredictorOutput(
                features=Tensor(np.concatenate([cache[i][k].features.data for i in indices])),
                depth=Tensor(np.concatenate([cache[i][k].depth.data for i in indices])),
            )
        )
    return outputs


def _mixer_loss(
    mixer: MixerModel,
    cache: Sequence[List[PredictorOutput]],
    samples: Sequence[DepthSample],
    indices: Sequence[int],
    cfg: ExperimentConfig,
) -> float:
    losses = []
    step = cfg.train.batch_size
    with no_grad():
        for start in range(0, len(indices), step):
            batch = list(indices[start : start + step])
            _, depth, mask = stack_samples([samples[i] for i in batch])
            pred = mixer_forward(mixer, _batch_outputs(cache, batch))
            losses.append(ssi_loss(pred, depth, mask, cfg.train.loss).value)
    return float(np.mean(losses))


def _mixer_rmse(
    mixer: MixerModel,
    cache: Sequence[List[PredictorOutput]],
    samples: Sequence[DepthSample],
    indices: Sequence[int],
    cfg: ExperimentConfig,
) -> float:
    _, depth, mask = stack_samples([samples[i] for i in indices])
    with no_grad():
        pred = mixer_forward(mixer, _batch_outputs(cache, indices)).data
    return compute_metrics(pred, depth, mask, cap=cfg.eval_cap(), min_eval=cfg.eval.min_depth).rmse


def selection_split(count: int, share: float, seed: int) -> Tuple[List[int], List[int]]:
    """
    Split mixer sample positions into a fitting part and a held-out part.

    The held-out part takes floor(count * share) samples but always leaves one to fit on;
    with nothing held out, selection falls back to the fitting samples.
    """
    held = min(int(math.floor(count * share)), count - 1)
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(count)
    fit = sorted(int(i) for i in order[held:])
    holdout = sorted(int(i) for i in order[:held])
    return fit, holdout or fit


def snapshot(params: ParameterSet) -> Dict[str, np.ndarray]:
    return {name: tensor.data.copy() for name, tensor in params.items()}


def restore(params: ParameterSet, values: Dict[str, np.ndarray]) -> None:
    for name, tensor in params.items():
        tensor.data = values[name].copy()


def train_mixer(
    models: Sequence[BasePredictorModel],
    split: DatasetSplit,
    samples: Sequence[DepthSample],
    cfg: ExperimentConfig,
    mixer_cfg: Optional[MixerConfig] = None,
    val_rmse: Optional[Sequence[float]] = None,
    test_samples: Optional[Sequence[DepthSample]] = None,
) -> TrainedMixer:
    """
    Train the level-1 mixer on D_train_mixer over frozen base predictors.

    With mixer_cfg.warm_start the fusion starts as an average and the head as a
    least-squares fit. The parameters kept are those of the epoch (0 being the start)
    with the lowest RMSE on the held-out part of D_train_mixer.

    Args:
        models: Trained base predictors (all K; the mixer uses mixer_cfg.subset of them)
        split: Dataset split naming D_train_mixer
        samples: Samples the split ids refer to
        cfg: Experiment configuration
        mixer_cfg: Mixer kind, location, subset and order (defaults to cfg.mixer)
        val_rmse: Per-predictor RMSE on D_train_mixer used to rank RBF inputs
        test_samples: When given, the trained mixer is scored on them

    Returns:
        TrainedMixer; base predictor parameters are bit-identical before and after
    """
    mixer_cfg = mixer_cfg or cfg.mixer
    subset = resolve_subset(mixer_cfg, len(models))
    chosen = [models[i] for i in subset]
    mixer_samples = select(samples, split.train_mixer)
    if not mixer_samples:
        raise ValueError("The mixer training split is empty")
    if MixerKind(mixer_cfg.kind) is MixerKind.RBF and not mixer_cfg.order and val_rmse is None:
        val_rmse = validation_rmse(models, mixer_samples, cfg)
    order = resolve_order(mixer_cfg, subset, val_rmse)

    digests = [model.params.digest() for model in models]
    flags = [[t.requires_grad for _, t in model.params.items()] for model in models]
    for model in models:
        model.params.set_requires_grad(False)
    try:
        cache = cached_outputs(chosen, mixer_samples)
        seed = task_seed(cfg.train.seed, MIXER_STREAM)
        mixer = build_mixer(
            mixer_cfg,
            num_predictors=len(chosen),
            feature_channels=cfg.model.feature_channels,
            kappa=cfg.model.kappa,
            order=order,
            seed=seed,
        )
        fit, holdout = selection_split(len(mixer_samples), mixer_cfg.holdout, seed)
        if mixer_cfg.warm_start:
            warm_start_mixer(mixer, cache, mixer_samples, fit, alpha=mixer_cfg.ridge_alpha)
        fitted = _fit_mixer(mixer, cache, mixer_samples, fit, holdout, mixer_cfg, cfg, seed)
        test_report = None
        if test_samples:
            rgb, gt, mask = stack_samples(test_samples)
            pred = ensemble_depth(chosen, mixer, rgb)
            test_report = compute_metrics(
                pred, gt, mask, cap=cfg.eval_cap(), min_eval=cfg.eval.min_depth
            )
    finally:
        for model, model_flags in zip(models, flags):
            for (_, tensor), flag in zip(model.params.items(), model_flags):
                tensor.requires_grad = flag

    if [model.params.digest() for model in models] != digests:
        raise RuntimeError("Base predictor parameters changed during mixer training")
    logger.info(
        "mixer %s/%s over predictors %s finished: loss %.5f -> %.5f, kept epoch %d "
        "(held-out RMSE %.4f)",
        mixer.kind.value,
        mixer.fusion_location.value,
        subset,
        fitted.initial_loss,
        fitted.final_loss,
        fitted.selected_epoch,
        fitted.holdout_rmse,
    )
    if test_report is not None:
        logger.info("mixer %s test RMSE %.4f", mixer.kind.value, test_report.rmse)
    return TrainedMixer(
        mixer=mixer,
        subset=subset,
        loss_history=fitted.loss_history,
        initial_loss=fitted.initial_loss,
        final_loss=fitted.final_loss,
        predictor_digests=digests,
        selected_epoch=fitted.selected_epoch,
        holdout_rmse=fitted.holdout_rmse,
        test_report=test_report,
    )


@dataclass
class _MixerFit:
    loss_history: List[float]
    initial_loss: float
    final_loss: float
    selected_epoch: int
    holdout_rmse: float


def _fit_mixer(
    mixer: MixerModel,
    cache: Sequence[List[PredictorOutput]],
    samples: Sequence[DepthSample],
    fit: Sequence[int],
    holdout: Sequence[int],
    mixer_cfg: MixerConfig,
    cfg: ExperimentConfig,
    seed: int,
) -> _MixerFit:
    task = f"mixer_{mixer.kind.value}"
    epochs = mixer_cfg.epochs or cfg.train.epochs
    batch_size = cfg.train.batch_size
    state = OptimizerState.from_config(
        cfg.train, total_steps(len(fit), epochs, batch_size), base_lr=mixer_cfg.base_lr
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    initial = _mixer_loss(mixer, cache, samples, fit, cfg)
    _check_finite(task, initial)
    best_rmse = _mixer_rmse(mixer, cache, samples, holdout, cfg)
    best_epoch, best_params = 0, snapshot(mixer.params)
    history = []
    for epoch in range(epochs):
        losses = []
        lr = 0.0
        for batch_index in iterate_batches(len(fit), batch_size, rng):
            indices = [fit[int(i)] for i in batch_index]
            _, depth, mask = stack_samples([samples[i] for i in indices])
            mixer.params.zero_grad()
            pred = mixer_forward(mixer, _batch_outputs(cache, indices))
            loss = ssi_loss(pred, depth, mask, cfg.train.loss)
            _check_finite(task, loss.value)
            backward(loss.loss)
            lr = adamw_step(mixer.params, state)
            losses.append(loss.value)
        history.append(float(np.mean(losses)))
        rmse = _mixer_rmse(mixer, cache, samples, holdout, cfg)
        if rmse < best_rmse:
            best_rmse, best_epoch, best_params = rmse, epoch + 1, snapshot(mixer.params)
        logger.info(
            "%s epoch %d/%d loss %.5f held-out rmse %.4f lr %.3g",
            task,
            epoch + 1,
            epochs,
            history[-1],
            rmse,
            lr,
        )
    mixer.params.zero_grad()
    restore(mixer.params, best_params)
    final = _mixer_loss(mixer, cache, samples, fit, cfg)
    _check_finite(task, final)
    return _MixerFit(
        loss_history=history,
        initial_loss=initial,
        final_loss=final,
        selected_epoch=best_epoch,
        holdout_rmse=best_rmse,
    )

from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

from data.samples import select, stack_samples
from data.splits import split_dataset
from data.synthetic import generate_splits
from ml.autodiff import ops
from ml.autodiff.parameters import ParameterSet
from ml.autodiff.tensor import Tensor
from ml.cli import _protocol_rows, summarize_ablation
from ml.config import FusionLocation, MixerConfig, MixerKind, load_config
from ml.errors import DomainError, TrainingDivergedError
from ml.evaluation.evaluate import ensemble_depth
from ml.evaluation.metrics import compute_metrics
from ml.training.algorithm import (
    MIXER_STREAM,
    _check_finite,
    resolve_subset,
    selection_split,
    task_seed,
    train_base_predictors,
    train_mixer,
    train_single_predictor,
)
from ml.training.optimizer import OptimizerState, adamw_step, poly_lr
from ml.training.warm_start import fit_depth_head


def _single(value: float) -> ParameterSet:
    params = ParameterSet()
    params.add("w", Tensor(np.array([value]), requires_grad=True, dtype=np.float64))
    return params


def test_poly_schedule():
    state = OptimizerState(base_lr=0.1, total_steps=10, power=1.0)
    assert poly_lr(state) == pytest.approx(0.1)
    state.step = 5
    assert poly_lr(state) == pytest.approx(0.05)
    state.step = 10
    assert poly_lr(state) == 0.0


def test_first_adamw_step_moves_by_lr_plus_decay():
    params = _single(1.0)
    state = OptimizerState(base_lr=0.1, total_steps=100, weight_decay=0.01, eps=1e-6)
    lr = adamw_step(params, state, {"w": np.array([2.0])})
    assert lr == pytest.approx(0.1)
    expected = 1.0 - 0.1 * (2.0 / (2.0 + 1e-6) + 0.01 * 1.0)
    assert params["w"].data[0] == pytest.approx(expected, rel=1e-12)
    assert state.step == 1


def test_adamw_replaces_parameter_arrays():
    params = _single(1.0)
    before = params["w"].data
    adamw_step(params, OptimizerState(base_lr=0.1, total_steps=10), {"w": np.array([1.0])})
    assert before[0] == 1.0
    assert params["w"].data is not before


def test_adamw_rejects_non_finite_gradients_without_touching_parameters():
    params = _single(1.0)
    state = OptimizerState(base_lr=0.1, total_steps=10)
    with pytest.raises(DomainError):
        adamw_step(params, state, {"w": np.array([np.inf])})
    assert params["w"].data[0] == 1.0
    assert state.step == 0


def test_task_seeds_are_stable_and_distinct():
    assert task_seed(0, 1) == task_seed(0, 1)
    assert len({task_seed(0, i) for i in range(5)}) == 5
    assert task_seed(0, 1) != task_seed(1, 1)


def test_divergence_is_reported_per_task():
    with pytest.raises(TrainingDivergedError) as exc:
        _check_finite("predictor_2", float("nan"))
    assert exc.value.task == "predictor_2"


def test_resolve_subset():
    assert resolve_subset(MixerConfig(), 3) == [0, 1, 2]
    assert resolve_subset(MixerConfig(subset=[2, 0]), 3) == [2, 0]
    for bad in ([0, 0], [3]):
        with pytest.raises(ValueError):
            resolve_subset(MixerConfig(subset=bad), 3)


def test_predictor_training_is_deterministic_and_order_independent(tiny_config, tiny_data):
    train, _, split = tiny_data
    both = train_base_predictors(split, train, tiny_config.predictor, tiny_config)
    again = train_single_predictor(
        1,
        tiny_config.predictor[1],
        select(train, split.train_base),
        select(train, split.train_mixer),
        tiny_config,
    )
    assert [p.index for p in both] == [0, 1]
    assert both[1].model.params.digest() == again.model.params.digest()
    assert both[1].loss_history == again.loss_history
    assert both[0].model.params.digest() != both[1].model.params.digest()
    for result in both:
        assert len(result.loss_history) == tiny_config.train.epochs
        assert np.isfinite(result.val_rmse)


def test_predictor_training_lowers_the_loss(tiny_config, tiny_data):
    train, _, split = tiny_data
    cfg = tiny_config.model_copy(
        update={"train": tiny_config.train.model_copy(update={"epochs": 8})}
    )
    result = train_single_predictor(
        0, cfg.predictor[0], select(train, split.train_base), [], cfg
    )
    assert result.final_loss < result.initial_loss
    assert np.isnan(result.val_rmse)


@pytest.fixture
def trained(tiny_config, tiny_data):
    train, _, split = tiny_data
    return train_base_predictors(split, train, tiny_config.predictor, tiny_config)


@pytest.mark.parametrize("kind", list(MixerKind))
def test_mixer_training_leaves_predictors_untouched(kind, trained, tiny_config, tiny_data):
    train, _, split = tiny_data
    models = [t.model for t in trained]
    digests = [m.params.digest() for m in models]
    result = train_mixer(models, split, train, tiny_config, MixerConfig(kind=kind))
    assert [m.params.digest() for m in models] == digests
    assert result.predictor_digests == digests
    assert all(t.requires_grad for m in models for _, t in m.params.items())
    assert result.mixer.num_predictors == 2
    assert len(result.loss_history) == tiny_config.train.epochs
    assert np.isfinite(result.final_loss)


def test_ranked_mixer_orders_worst_predictor_first(trained, tiny_config, tiny_data):
    train, _, split = tiny_data
    models = [t.model for t in trained]
    result = train_mixer(
        models, split, train, tiny_config, MixerConfig(kind=MixerKind.RBF), val_rmse=[0.2, 0.7]
    )
    assert result.mixer.order == [1, 0]
    explicit = train_mixer(
        models, split, train, tiny_config, MixerConfig(kind=MixerKind.RBF, order=[0, 1])
    )
    assert explicit.mixer.order == [0, 1]


def test_mixer_over_a_subset(trained, tiny_config, tiny_data):
    train, _, split = tiny_data
    models = [t.model for t in trained]
    result = train_mixer(
        models, split, train, tiny_config, MixerConfig(kind=MixerKind.CBF, subset=[1])
    )
    assert result.subset == [1]
    assert result.mixer.num_predictors == 1
    assert result.mixer.params["concat.weight"].shape[1] == tiny_config.model.feature_channels


def test_selection_split_holds_out_a_share_and_falls_back_when_tiny():
    fit, holdout = selection_split(30, 0.25, seed=1)
    assert (len(fit), len(holdout)) == (23, 7)
    assert sorted(fit + holdout) == list(range(30))
    assert selection_split(30, 0.25, seed=1) == (fit, holdout)
    assert selection_split(2, 0.25, seed=1) == ([0, 1], [0, 1])
    assert selection_split(1, 0.9, seed=1) == ([0], [0])


def test_head_fit_recovers_a_sigmoid_head(float64):
    rng = np.random.default_rng(10)
    fused = rng.normal(size=(3, 2, 6, 7))
    weight = rng.normal(scale=0.2, size=(1, 2, 3, 3))
    bias = np.array([0.3])
    logits = ops.conv2d_3x3(Tensor(fused), Tensor(weight), Tensor(bias)).data
    depth = 10.0 * expit(logits)
    fit = fit_depth_head(fused, depth, np.ones(depth.shape, dtype=bool), kappa=10.0, alpha=1e-9)
    np.testing.assert_allclose(fit.weight, weight, atol=1e-6)
    np.testing.assert_allclose(fit.bias, bias, atol=1e-6)
    assert fit.rmse < 1e-6


def test_head_fit_needs_valid_pixels():
    depth = np.zeros((1, 1, 3, 3))
    with pytest.raises(ValueError):
        fit_depth_head(np.ones((1, 2, 3, 3)), depth, depth > 0, kappa=10.0)


def test_mixer_keeps_its_best_epoch_and_scores_the_test_split(trained, tiny_config, tiny_data):
    train, test, split = tiny_data
    models = [t.model for t in trained]
    mixer_cfg = MixerConfig(kind=MixerKind.UWF)
    warm = train_mixer(models, split, train, tiny_config, mixer_cfg, test_samples=test)
    assert 0 <= warm.selected_epoch <= tiny_config.train.epochs
    assert warm.test_report.valid_count == 4 * 8 * 8

    mixer_samples = select(train, split.train_mixer)
    seed = task_seed(tiny_config.train.seed, MIXER_STREAM)
    _, holdout = selection_split(len(mixer_samples), mixer_cfg.holdout, seed)
    rgb, gt, mask = stack_samples([mixer_samples[i] for i in holdout])
    pred = ensemble_depth(models, warm.mixer, rgb)
    cap = tiny_config.eval_cap()
    rmse = compute_metrics(pred, gt, mask, cap=cap, min_eval=tiny_config.eval.min_depth).rmse
    assert warm.holdout_rmse == pytest.approx(rmse, rel=1e-4)

    cold = train_mixer(
        models, split, train, tiny_config, MixerConfig(kind=MixerKind.UWF, warm_start=False)
    )
    assert cold.test_report is None
    assert 0 <= cold.selected_epoch <= tiny_config.train.epochs


DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"

# desk protocol at a quarter of the pixels and fewer scenes and epochs
REDUCED_PROTOCOL = {
    "scene.count": 96,
    "scene.test_count": 24,
    "scene.height": 16,
    "scene.width": 16,
    "shift.enabled": False,
    "train.epochs": 10,
}
PROTOCOL_SEEDS = range(5)


@pytest.fixture(scope="module")
def protocol_rows():
    cfg = load_config(DESK_CONFIG, overrides=REDUCED_PROTOCOL)
    sweep = {"kinds": list(MixerKind), "locations": list(FusionLocation), "counts": [3]}
    return [row for seed in PROTOCOL_SEEDS for row in _protocol_rows(seed, cfg, sweep)]


@pytest.mark.slow
@pytest.mark.parametrize("kind", list(MixerKind))
def test_penultimate_mixers_match_the_best_base_predictor(kind, protocol_rows):
    wins, total = summarize_ablation(protocol_rows)[(kind.value, "pl", 3)]
    assert total == len(PROTOCOL_SEEDS)
    assert wins >= 4


@pytest.mark.slow
def test_ranked_mixer_prefers_penultimate_fusion(protocol_rows):
    rmse = {
        (row["seed"], row["location"]): row["rmse"]
        for row in protocol_rows
        if row["kind"] == MixerKind.RBF.value
    }
    wins = sum(rmse[(seed, "pl")] <= rmse[(seed, "fl")] for seed in PROTOCOL_SEEDS)
    assert wins >= 3


@pytest.mark.slow
def test_predictor_loss_falls_through_the_first_ten_epochs():
    overrides = {
        **REDUCED_PROTOCOL,
        "scene.count": 48,
        "train.epochs": 20,
        "augment.enabled": False,
    }
    falling = 0
    for seed in range(10):
        cfg = load_config(DESK_CONFIG, overrides={**overrides, "train.seed": seed})
        train, _, _ = generate_splits(cfg.scene)
        split = split_dataset(train, seed=seed)
        result = train_single_predictor(
            0, cfg.predictor[0], select(train, split.train_base), [], cfg
        )
        assert result.final_loss < result.initial_loss
        first = result.loss_history[:10]
        falling += all(later < earlier for earlier, later in zip(first, first[1:]))
    assert falling >= 8

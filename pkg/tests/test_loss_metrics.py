import numpy as np
import pytest

from ml.autodiff.tensor import Tensor, backward
from ml.config import SsiLossConfig
from ml.errors import DomainError, EmptyMaskError, ShapeError
from ml.evaluation.loss import ssi_loss
from ml.evaluation.metrics import (
    MetricsReport,
    REPORT_COLUMNS,
    clip_to_cap,
    compute_metrics,
    range_curve,
)


def _depth(seed: int = 0, shape=(2, 1, 4, 5)):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1.0, 9.0, size=shape)
    pred = gt * np.exp(rng.normal(scale=0.2, size=shape))
    mask = rng.random(shape) < 0.7
    mask.flat[0] = True
    return pred, gt, mask


def test_loss_is_zero_for_a_perfect_prediction(float64):
    _, gt, mask = _depth()
    assert ssi_loss(Tensor(gt), gt, mask).value == pytest.approx(0.0, abs=1e-12)


def test_loss_matches_the_closed_form(float64):
    pred, gt, mask = _depth()
    cfg = SsiLossConfig(alpha=10.0, eta=0.85)
    g = np.log(pred[mask]) - np.log(gt[mask])
    expected = 10.0 * np.sqrt(np.mean(g**2) - 0.85 * np.mean(g) ** 2)
    result = ssi_loss(Tensor(pred), gt, mask, cfg)
    assert result.value == pytest.approx(expected, rel=1e-9)
    assert result.valid_count == int(mask.sum())
    assert result.g_mean == pytest.approx(np.mean(g))


def test_global_scale_only_costs_the_uncancelled_mean(float64):
    _, gt, mask = _depth()
    scaled = Tensor(gt * 2.0)
    assert ssi_loss(scaled, gt, mask, SsiLossConfig(eta=1.0)).value == pytest.approx(0.0, abs=1e-6)
    partial = ssi_loss(scaled, gt, mask, SsiLossConfig(alpha=10.0, eta=0.85)).value
    assert partial == pytest.approx(10.0 * np.sqrt(0.15) * np.log(2.0), rel=1e-9)


def test_masked_out_pixels_do_not_matter(float64):
    pred, gt, mask = _depth()
    other = pred.copy()
    other[~mask] = 123.0
    assert ssi_loss(Tensor(pred), gt, mask).value == ssi_loss(Tensor(other), gt, mask).value

    x = Tensor(pred, requires_grad=True)
    backward(ssi_loss(x, gt, mask).loss)
    assert np.all(x.grad[~mask] == 0)
    assert np.any(x.grad[mask] != 0)


def test_loss_input_errors():
    pred, gt, mask = _depth()
    with pytest.raises(EmptyMaskError):
        ssi_loss(Tensor(pred), gt, np.zeros_like(mask))
    with pytest.raises(ShapeError):
        ssi_loss(Tensor(pred), gt[:1], mask)
    bad_gt = gt.copy()
    bad_gt.flat[0] = 0.0
    with pytest.raises(DomainError):
        ssi_loss(Tensor(pred), bad_gt, mask)


def test_metrics_of_a_known_prediction():
    gt = np.array([1.0, 2.0, 4.0, 8.0])
    pred = np.array([1.2, 2.0, 4.0, 8.0])
    report = compute_metrics(pred, gt, cap=(0.0, 10.0))
    assert report.abs_rel == pytest.approx(0.05)
    assert report.sq_rel == pytest.approx(0.01)
    assert report.rmse == pytest.approx(0.1)
    assert report.log10 == pytest.approx(np.log10(1.2) / 4)
    assert report.delta1 == 1.0
    assert report.valid_count == 4


def test_accuracy_thresholds_are_strict():
    gt = np.array([1.0, 2.0, 4.0])
    report = compute_metrics(gt * 1.25, gt, cap=(0.0, 10.0))
    assert report.delta1 == 0.0
    assert report.delta2 == 1.0


def test_metrics_respect_the_cap_and_clip_predictions():
    gt = np.array([2.0, 5.0, 12.0])
    pred = np.array([2.0, 20.0, 1.0])
    report = compute_metrics(pred, gt, cap=(1.0, 10.0))
    assert report.valid_count == 2
    # 20 is clipped to the cap of 10
    assert report.rmse == pytest.approx(np.sqrt(25.0 / 2))
    with pytest.raises(EmptyMaskError):
        compute_metrics(pred, gt, cap=(20.0, 30.0))


def test_clip_to_cap():
    pred = np.array([0.0, 3.0, 50.0])
    gt = np.array([0.5, 3.0, 9.0])
    clipped, d, kept = clip_to_cap(pred, gt, (1.0, 10.0))
    assert kept.tolist() == [False, True, True]
    assert clipped.tolist()[1:] == [3.0, 10.0]
    np.testing.assert_array_equal(d, gt)
    with pytest.raises(ValueError):
        clip_to_cap(pred, gt, (5.0, 5.0))


def test_range_curve_uses_consecutive_bands():
    gt = np.array([1.0, 3.0, 5.0, 9.0])
    pred = gt + np.array([0.5, 1.0, 0.0, 2.0])
    rows = range_curve(pred, gt, None, caps=[2.0, 4.0, 6.0, 8.0])
    assert [(r["cap_min"], r["cap_max"]) for r in rows] == [
        (0.001, 2.0),
        (2.0, 4.0),
        (4.0, 6.0),
        (6.0, 8.0),
    ]
    assert [r["valid_count"] for r in rows] == [1, 1, 1, 0]
    assert rows[1]["rmse"] == pytest.approx(1.0)
    assert np.isnan(rows[3]["rmse"])
    assert rows[1]["rmse_std"] == 0.0
    assert np.isnan(rows[3]["rmse_std"])


def test_range_curve_spread_is_over_per_image_rmse():
    gt = np.array([[2.0, 3.0], [2.0, 3.0]]).reshape(2, 1, 1, 2)
    pred = np.array([[3.0, 4.0], [2.0, 3.0]]).reshape(2, 1, 1, 2)
    near, far = range_curve(pred, gt, None, caps=[5.0, 10.0])
    assert near["rmse"] == pytest.approx(np.sqrt(0.5))
    assert near["rmse_std"] == pytest.approx(0.5)
    assert far["valid_count"] == 0
    assert np.isnan(far["rmse_std"])


def test_report_rows_use_csv_column_names():
    report = compute_metrics(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    row = report.as_row()
    assert list(row) == REPORT_COLUMNS
    assert MetricsReport.from_row(row) == report

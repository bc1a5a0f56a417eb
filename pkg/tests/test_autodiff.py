import numpy as np
import pytest

from ml.autodiff import ops
from ml.autodiff.gradcheck import grad_check
from ml.autodiff.parameters import ParameterSet, count_parameters, parameter_digest
from ml.autodiff.tensor import ComputationTape, Tensor, backward, no_grad, precision
from ml.errors import DomainError, ShapeError
from ml.evaluation.gradient_suite import run_gradcheck_suite, suite_passed


def test_conv_center_tap_is_identity_plus_bias(float64):
    x = Tensor(np.arange(2 * 5 * 5, dtype=float).reshape(1, 2, 5, 5))
    weight = np.zeros((2, 2, 3, 3))
    weight[0, 0, 1, 1] = 1.0
    weight[1, 1, 1, 1] = 1.0
    out = ops.conv2d_3x3(x, Tensor(weight), Tensor(np.array([0.5, -1.0])))
    assert out.shape == (1, 2, 5, 5)
    np.testing.assert_allclose(out.data[0, 0], x.data[0, 0] + 0.5)
    np.testing.assert_allclose(out.data[0, 1], x.data[0, 1] - 1.0)


def test_dilated_conv_keeps_size_and_reads_spaced_taps(float64):
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 5] = 1.0
    weight = np.zeros((1, 1, 3, 3))
    weight[0, 0, 1, 2] = 1.0  # right-hand tap
    out = ops.conv2d_3x3(Tensor(x), Tensor(weight), Tensor(np.zeros(1)), dilation=2)
    assert out.shape == (1, 1, 7, 7)
    # output (3, 3) reads input (3, 3 + 2)
    assert out.data[0, 0, 3, 3] == 1.0
    assert out.data.sum() == 1.0


def test_conv_rejects_mismatched_channels():
    with pytest.raises(ShapeError):
        ops.conv2d_3x3(
            Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1))
        )


def test_mul_backward_gives_the_other_operand(float64):
    a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    b = Tensor(np.array([4.0, 5.0, 6.0]), requires_grad=True)
    backward(ops.reduce_sum(ops.mul(a, b)))
    np.testing.assert_allclose(a.grad, b.data)
    np.testing.assert_allclose(b.grad, a.data)


def test_backward_accumulates_until_zero_grad(float64):
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ops.reduce_sum(a))
    backward(ops.reduce_sum(a))
    np.testing.assert_allclose(a.grad, [2.0, 2.0])
    a.zero_grad()
    assert a.grad is None


def test_shared_input_gradients_add_up(float64):
    a = Tensor(np.array([3.0]), requires_grad=True)
    backward(ops.reduce_sum(ops.mul(a, a)))
    np.testing.assert_allclose(a.grad, [6.0])


def test_backward_needs_a_scalar_root():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.scale(a, 2.0))


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = ops.mul(a, a)
    assert not out.requires_grad
    assert out.is_leaf


def test_log_reports_the_offending_index():
    with pytest.raises(DomainError) as exc:
        ops.log(Tensor(np.array([1.0, 0.0, 2.0])))
    assert exc.value.index == (1,)


def test_sqrt_adjoint_at_zero_is_zero(float64):
    x = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    backward(ops.reduce_sum(ops.sqrt(x)))
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_clamp_blocks_gradient_outside_range(float64):
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    backward(ops.reduce_sum(ops.clamp(x, 0.0, 1.0)))
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


def test_expand_and_slice_adjoints(float64):
    s = Tensor(np.array(2.0), requires_grad=True)
    backward(ops.reduce_sum(ops.expand(s, (2, 3))))
    assert float(s.grad) == 6.0

    x = Tensor(np.ones((1, 4, 2, 2)), requires_grad=True)
    backward(ops.reduce_sum(ops.slice_channels(x, 1, 3)))
    np.testing.assert_allclose(x.grad[0, :, 0, 0], [0.0, 1.0, 1.0, 0.0])


def test_concat_channels_orders_inputs():
    a = Tensor(np.zeros((1, 1, 2, 2)))
    b = Tensor(np.ones((1, 2, 2, 2)))
    out = ops.concat_channels([a, b])
    assert out.shape == (1, 3, 2, 2)
    assert out.data[0, 0].sum() == 0 and out.data[0, 1:].min() == 1
    assert ops.concat_channels([a]) is a
    with pytest.raises(ShapeError):
        ops.concat_channels([a, Tensor(np.ones((1, 1, 3, 2)))])


def test_elementwise_dispatch():
    x = Tensor(np.array([1.0, 4.0]))
    np.testing.assert_allclose(ops.elementwise("sqrt", x).data, [1.0, 2.0])
    np.testing.assert_allclose(ops.elementwise("scale", x, c=3.0).data, [3.0, 12.0])
    np.testing.assert_allclose(ops.elementwise("tanh", x).data, np.tanh(x.data))
    with pytest.raises(ValueError):
        ops.elementwise("scale", x)


def test_tape_lists_producers_first(float64):
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    root = ops.reduce_mean(ops.tanh(ops.scale(a, 2.0)))
    assert ComputationTape.record(root).operations() == ["affine", "tanh", "mean"]


def test_precision_selects_storage_dtype():
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with precision(np.float16):
            pass


def test_grad_check_accepts_correct_and_flags_wrong_adjoints():
    point = Tensor(np.linspace(-1.0, 1.0, 6))
    good = grad_check(lambda t: ops.reduce_sum(ops.tanh(t)), point, name="tanh")
    assert good.passed and good.coordinates == 6

    def doubled(t):
        out = Tensor.from_op(t.data.copy(), "bad", (t,), lambda g: (2 * g,))
        return ops.reduce_sum(out)

    bad = grad_check(doubled, point, name="bad")
    assert not bad.passed
    assert bad.max_rel_error > 0.1


def test_parameter_set_counts_and_digests():
    params = ParameterSet()
    params.add("a.weight", Tensor(np.ones((2, 3))))
    params.add("a.bias", Tensor(np.zeros(2)))
    assert count_parameters(params) == 8
    digest = parameter_digest(params)
    assert digest == params.digest()
    params["a.bias"].data = np.ones(2, dtype=np.float32)
    assert parameter_digest(params) != digest
    with pytest.raises(KeyError):
        params.add("a.bias", Tensor(np.zeros(2)))


def test_conv_is_linear_in_its_input(float64):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 5, 6))
    y = rng.normal(size=(2, 3, 5, 6))
    weight = Tensor(rng.normal(size=(4, 3, 3, 3)))
    zero = Tensor(np.zeros(4))

    def conv(data):
        return ops.conv2d_3x3(Tensor(data), weight, zero, dilation=2).data

    np.testing.assert_allclose(conv(2.7 * x), 2.7 * conv(x), rtol=0, atol=1e-12)
    np.testing.assert_allclose(conv(x + y), conv(x) + conv(y), rtol=0, atol=1e-12)


def test_slicing_a_concatenation_gives_back_each_input():
    rng = np.random.default_rng(7)
    inputs = [Tensor(rng.normal(size=(2, c, 3, 4))) for c in (1, 3, 2)]
    stacked = ops.concat_channels(inputs)
    start = 0
    for t in inputs:
        stop = start + t.shape[1]
        np.testing.assert_array_equal(ops.slice_channels(stacked, start, stop).data, t.data)
        start = stop


def test_gradients_of_separate_graphs_add_up_on_a_shared_leaf(float64):
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 2, 4, 4)))

    def first():
        return ops.reduce_sum(ops.mul(ops.tanh(x), w))

    def second():
        return ops.reduce_mean(ops.mul(x, x))

    backward(first())
    g1 = x.grad.copy()
    x.zero_grad()
    backward(second())
    g2 = x.grad.copy()
    x.zero_grad()

    backward(first())
    backward(second())
    np.testing.assert_allclose(x.grad, g1 + g2, rtol=0, atol=1e-12)


@pytest.mark.slow
def test_every_operation_passes_the_gradient_check_over_ten_seeds():
    reports = run_gradcheck_suite(seeds=range(10))
    failed = [r.name for r in reports if not r.passed]
    assert not failed
    assert suite_passed(reports)
    assert {r.name.rsplit("@", 1)[1] for r in reports} == {str(s) for s in range(10)}

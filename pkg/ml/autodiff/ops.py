from __future__ import annotations

from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from ml.autodiff.tensor import Tensor
from ml.errors import DomainError, ShapeError


class ActivationKind(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    ELU = "elu"
    IDENTITY = "identity"


class ElementwiseKind(str, Enum):
    ADD = "add"
    MUL = "mul"
    SCALE = "scale"
    LOG = "log"
    SQRT = "sqrt"


class ReduceKind(str, Enum):
    SUM = "sum"
    MEAN = "mean"


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs identical shapes, got {a.shape} and {b.shape}")


def im2col_3x3(x: np.ndarray, dilation: int = 1) -> np.ndarray:
    """(N, C, H, W) -> (N, C, 3, 3, H, W) zero-padded neighbourhoods, tap order of conv2d_3x3."""
    n, c, h, w = x.shape
    d = int(dilation)
    padded = np.pad(x, ((0, 0), (0, 0), (d, d), (d, d)))
    cols = np.empty((n, c, 3, 3, h, w), dtype=padded.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = padded[:, :, ky * d : ky * d + h, kx * d : kx * d + w]
    return cols


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding = dilation ("same" output size).

    Args:
        x: Input of shape (N, Cin, H, W)
        weight: Kernel of shape (Cout, Cin, 3, 3)
        bias: Bias of shape (Cout,)
        dilation: Spacing between kernel taps

    Returns:
        Tensor of shape (N, Cout, H, W)
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d_3x3 input must be (N, C, H, W), got {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3 weight must be (Cout, Cin, 3, 3), got {weight.shape}")
    cout, cin = weight.shape[:2]
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d_3x3 input has {x.shape[1]} channels, weight expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_3x3 bias must be ({cout},), got {bias.shape}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")

    n, _, h, w = x.shape
    d = int(dilation)
    cols = im2col_3x3(x.data, d)
    out = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def _backward(grad: np.ndarray):
        grad_weight = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 4, 5]))
        grad_bias = grad.sum(axis=(0, 2, 3))
        grad_cols = np.tensordot(grad, weight.data, axes=([1], [0]))
        grad_padded = np.zeros((n, cin, h + 2 * d, w + 2 * d), dtype=cols.dtype)
        for ky in range(3):
            for kx in range(3):
                grad_padded[:, :, ky * d : ky * d + h, kx * d : kx * d + w] += grad_cols[
                    :, :, :, :, ky, kx
                ].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, d : d + h, d : d + w]
        return grad_x, grad_weight, grad_bias

    return Tensor.from_op(out, "conv2d_3x3", (x, weight, bias), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor.from_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def add_n(inputs: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors, bitwise independent of argument order."""
    if not inputs:
        raise ShapeError("add_n needs at least one input")
    for t in inputs:
        _same_shape("add_n", inputs[0], t)
    if len(inputs) == 1:
        return inputs[0]
    out = np.sort(np.stack([t.data for t in inputs]), axis=0).sum(axis=0)
    return Tensor.from_op(out, "add_n", tuple(inputs), lambda g: [g] * len(inputs))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor.from_op(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return Tensor.from_op(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def affine(x: Tensor, a: float, b: float = 0.0) -> Tensor:
    """a * x + b with scalar coefficients."""
    out = np.asarray(a * x.data + b, dtype=x.dtype)
    return Tensor.from_op(out, "affine", (x,), lambda g: (np.asarray(a * g, dtype=g.dtype),))


def scale(x: Tensor, c: float) -> Tensor:
    return affine(x, c, 0.0)


def log(x: Tensor) -> Tensor:
    bad = np.argwhere(~(x.data > 0))
    if bad.size:
        raise DomainError("log needs strictly positive input", tuple(bad[0]))
    return Tensor.from_op(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the adjoint at exactly 0 is taken as 0."""
    bad = np.argwhere(~(x.data >= 0))
    if bad.size:
        raise DomainError("sqrt needs non-negative input", tuple(bad[0]))
    out = np.sqrt(x.data)

    def _backward(grad: np.ndarray):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, 0.5 * grad / safe, 0).astype(grad.dtype, copy=False),)

    return Tensor.from_op(out, "sqrt", (x,), _backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo) with a zero subgradient wherever the clamp is active."""
    out = np.maximum(x.data, np.asarray(lo, dtype=x.dtype))
    return Tensor.from_op(out, "clamp_min", (x,), lambda g: (g * (x.data > lo),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; zero subgradient outside the open interval."""
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    inside = (x.data > lo) & (x.data < hi)
    return Tensor.from_op(out, "clamp", (x,), lambda g: (g * inside,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor.from_op(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, "tanh", (x,), lambda g: (g * (1 - out * out),))


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    positive = x.data >= 0
    out = np.where(positive, x.data, np.expm1(np.minimum(x.data, 0)))
    return Tensor.from_op(out, "elu", (x,), lambda g: (g * np.where(positive, 1, out + 1),))


def identity(x: Tensor) -> Tensor:
    return Tensor.from_op(x.data.copy(), "identity", (x,), lambda g: (g,))


_ACTIVATIONS = {
    ActivationKind.SIGMOID: sigmoid,
    ActivationKind.TANH: tanh,
    ActivationKind.ELU: elu,
    ActivationKind.IDENTITY: identity,
}


def activation(kind: Union[ActivationKind, str], x: Tensor) -> Tensor:
    return _ACTIVATIONS[ActivationKind(kind)](x)


def elementwise(
    kind: Union[ElementwiseKind, ActivationKind, str],
    *operands: Tensor,
    c: Optional[float] = None,
) -> Tensor:
    """Dispatch one pointwise operation by name (add, mul, scale, log, sqrt or an activation)."""
    value = kind.value if isinstance(kind, Enum) else str(kind)
    if value in ActivationKind._value2member_map_:
        (x,) = operands
        return activation(value, x)
    kind = ElementwiseKind(value)
    if kind is ElementwiseKind.ADD:
        return add(*operands)
    if kind is ElementwiseKind.MUL:
        return mul(*operands)
    if kind is ElementwiseKind.SCALE:
        if c is None:
            raise ValueError("scale needs a constant c")
        (x,) = operands
        return scale(x, c)
    (x,) = operands
    return log(x) if kind is ElementwiseKind.LOG else sqrt(x)


def reduce_sum(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("sum over an empty tensor")
    out = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.dtype)
    return Tensor.from_op(out, "sum", (x,), lambda g: (np.full_like(x.data, g),))


def reduce_mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean over an empty tensor")
    n = x.size
    out = np.asarray(np.sum(x.data, dtype=np.float64) / n, dtype=x.dtype)
    return Tensor.from_op(out, "mean", (x,), lambda g: (np.full_like(x.data, g / n),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat a single-element tensor over `shape`; the adjoint sums back."""
    if x.size != 1:
        raise ShapeError(f"expand needs a single-element tensor, got shape {x.shape}")
    out = np.full(tuple(shape), x.data.reshape(()), dtype=x.dtype)

    def _backward(grad: np.ndarray):
        total = np.asarray(np.sum(grad, dtype=np.float64), dtype=grad.dtype)
        return (total.reshape(x.shape),)

    return Tensor.from_op(out, "expand", (x,), _backward)


def reduce(kind: Union[ReduceKind, str], x: Tensor) -> Tensor:
    return reduce_sum(x) if ReduceKind(kind) is ReduceKind.SUM else reduce_mean(x)


def _nhw(t: Tensor):
    return (t.shape[0],) + t.shape[2:]


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack (N, Ci, H, W) tensors along the channel axis in argument order."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    first = inputs[0]
    for t in inputs:
        if t.ndim != 4 or first.ndim != 4 or _nhw(t) != _nhw(first):
            raise ShapeError(
                f"concat_channels needs matching (N, H, W), got {first.shape} and {t.shape}"
            )
    if len(inputs) == 1:
        return first
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def _backward(grad: np.ndarray):
        return [grad[:, bounds[i] : bounds[i + 1]] for i in range(len(inputs))]

    return Tensor.from_op(out, "concat_channels", tuple(inputs), _backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 4 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"Invalid channel slice [{start}:{stop}] of shape {x.shape}")

    def _backward(grad: np.ndarray):
        full = np.zeros_like(x.data)
        full[:, start:stop] = grad
        return (full,)

    return Tensor.from_op(x.data[:, start:stop].copy(), "slice_channels", (x,), _backward)

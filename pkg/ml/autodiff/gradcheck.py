from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ml.autodiff.tensor import Tensor, backward, no_grad, precision
from ml.errors import GradCheckError, ShapeError


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    passed: bool
    tol: float
    coordinates: int


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    name: str = "f",
) -> GradCheckReport:
    """
    Compare backward() against central finite differences in float64.

    Args:
        f: Scalar-valued tensor function
        point: Where to evaluate the gradient
        eps: Finite-difference step
        tol: Maximum accepted relative error
        name: Label carried into the report

    Returns:
        GradCheckReport with relative error ||a - n|| / max(||a||, ||n||, 1e-12)
    """
    with precision(np.float64):
        base = np.array(point.data, dtype=np.float64)
        x = Tensor(base, requires_grad=True)
        y = f(x)
        if y.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, {name} returned {y.shape}")
        analytic = np.zeros_like(base)
        if y.requires_grad:
            backward(y)
            if x.grad is not None:
                analytic = x.grad.astype(np.float64)

        numeric = np.zeros_like(base)
        with no_grad():
            for i in range(base.size):
                shifted = base.copy()
                shifted.flat[i] = base.flat[i] + eps
                f_plus = f(Tensor(shifted)).item()
                shifted.flat[i] = base.flat[i] - eps
                f_minus = f(Tensor(shifted)).item()
                diff = (f_plus - f_minus) / (2 * eps)
                if not np.isfinite(diff):
                    raise GradCheckError(f"{name}: non-finite finite difference at coordinate {i}")
                numeric.flat[i] = diff

    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    error = float(np.linalg.norm(analytic - numeric) / denom)
    return GradCheckReport(
        name=name, max_rel_error=error, passed=error < tol, tol=tol, coordinates=base.size
    )

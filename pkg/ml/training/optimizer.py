from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from ml.autodiff.parameters import ParameterSet
from ml.autodiff.tensor import Tensor
from ml.config import TrainConfig
from ml.errors import DomainError, ShapeError


@dataclass
class OptimizerState:
    """AdamW moments plus the polynomial learning-rate schedule."""

    base_lr: float
    total_steps: int
    power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")

    @classmethod
    def from_config(
        cls, cfg: TrainConfig, total_steps: int, base_lr: Optional[float] = None
    ) -> "OptimizerState":
        return cls(
            base_lr=cfg.base_lr if base_lr is None else base_lr,
            total_steps=total_steps,
            power=cfg.power,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )


def poly_lr(state: OptimizerState) -> float:
    """base_lr * (1 - t / T) ** power, zero from t = T on."""
    if state.step >= state.total_steps:
        return 0.0
    return state.base_lr * (1.0 - state.step / state.total_steps) ** state.power


def adamw_step(
    params: ParameterSet,
    state: OptimizerState,
    grads: Optional[Dict[str, np.ndarray]] = None,
) -> float:
    """
    One AdamW update with decoupled weight decay.

    Args:
        params: Parameters to update; each tensor's data is replaced, never edited in place
        state: Moments and schedule; advanced by one step
        grads: Gradients by parameter name (defaults to each tensor's .grad, zeros if None)

    Returns:
        The learning rate used for this step
    """
    for name, tensor in params.items():
        grad = _gradient(name, tensor, grads)
        bad = np.argwhere(~np.isfinite(grad))
        if bad.size:
            raise DomainError(f"Non-finite gradient for parameter '{name}'", bad[0])

    lr = poly_lr(state)
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, tensor in params.items():
        theta = tensor.data.astype(np.float64)
        grad = _gradient(name, tensor, grads).astype(np.float64)
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        theta = theta - lr * (update + state.weight_decay * theta)
        tensor.data = theta.astype(tensor.dtype)
    return lr


def _gradient(name: str, tensor: Tensor, grads: Optional[Dict[str, np.ndarray]]) -> np.ndarray:
    grad = grads.get(name) if grads is not None else tensor.grad
    if grad is None:
        return np.zeros_like(tensor.data)
    grad = np.asarray(grad)
    if grad.shape != tensor.shape:
        raise ShapeError(f"Gradient of '{name}' has shape {grad.shape}, expected {tensor.shape}")
    return grad

"""AdamW with decoupled weight decay, plus the warm-up / linear-decay learning-rate schedule."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from rsnet.tensor import Parameter

logger = logging.getLogger("rsnet.optim")

LR = 0.002
BETA1 = 0.937
BETA2 = 0.999
EPS = 1e-8
WEIGHT_DECAY = 5e-4


def decay_conv_weights(param: Parameter) -> bool:
    """Weight decay applies to convolution kernels only; norm gains, biases and scales are exempt."""
    return param.ndim > 1


@dataclass
class OptimizerState:
    lr: float = LR
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    weight_decay: float = WEIGHT_DECAY
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must be in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")

    def moments(self, param: Parameter) -> tuple[np.ndarray, np.ndarray]:
        if param.name not in self.m:
            self.m[param.name] = np.zeros_like(param.data)
            self.v[param.name] = np.zeros_like(param.data)
        m, v = self.m[param.name], self.v[param.name]
        if m.shape != param.shape:
            raise ValueError(f"optimizer moments for {param.name} have shape {m.shape}, parameter has {param.shape}")
        return m, v


def adamw_step(
    params: Iterable[Parameter],
    state: OptimizerState,
    decay: Callable[[Parameter], bool] | None = None,
    lr: float | None = None,
) -> None:
    """One AdamW update in place. ``lr`` overrides ``state.lr`` for scheduled runs."""
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    correction1 = 1 - state.beta1 ** t
    correction2 = 1 - state.beta2 ** t
    for param in params:
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        m, v = state.moments(param)
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        value = param.data
        if state.weight_decay and (decay is None or decay(param)):
            value = value * (1 - lr * state.weight_decay)
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = (value - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)


def scheduled_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0, lrf: float = 0.01) -> float:
    """Linear warm-up to ``base_lr`` then linear decay towards ``lrf * base_lr`` at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return base_lr * (1 - progress * (1 - lrf))

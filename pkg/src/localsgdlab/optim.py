"""Pure-functional optimizers: AdamW (inner), Nesterov momentum (outer),
plain SGD (for exact equivalence tests), and a cosine LR schedule.

Every step is a pure transition (params, grad, state) -> (params', state');
states carry flat vectors laid out like the parameter vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import LayoutError


@dataclass(frozen=True)
class AdamWHyper:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1


@dataclass
class AdamWState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    hyper: AdamWHyper = field(default_factory=AdamWHyper)

    @classmethod
    def init(cls, n_params: int, hyper: AdamWHyper | None = None) -> "AdamWState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, hyper or AdamWHyper())


@dataclass(frozen=True)
class NesterovHyper:
    lr: float = 0.7
    momentum: float = 0.9


@dataclass
class NesterovState:
    velocity: np.ndarray
    hyper: NesterovHyper = field(default_factory=NesterovHyper)

    @classmethod
    def init(cls, n_params: int, hyper: NesterovHyper | None = None) -> "NesterovState":
        return cls(np.zeros(n_params), hyper or NesterovHyper())


@dataclass(frozen=True)
class CosineSchedule:
    lr_peak: float
    total_steps: int
    final_fraction: float = 0.1
    warmup_steps: int = 0

    def __post_init__(self):
        if self.lr_peak <= 0 or self.total_steps <= 0:
            raise ValueError("lr_peak and total_steps must be positive")
        if not (0.0 < self.final_fraction <= 1.0):
            raise ValueError("final_fraction must be in (0, 1]")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    """Linear warmup to lr_peak, then cosine decay to final_fraction*lr_peak."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < schedule.warmup_steps:
        return schedule.lr_peak * step / schedule.warmup_steps
    span = max(1, schedule.total_steps - schedule.warmup_steps)
    progress = min(1.0, (step - schedule.warmup_steps) / span)
    f = schedule.final_fraction
    return schedule.lr_peak * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def _check_layout(theta: np.ndarray, *others: np.ndarray):
    for o in others:
        if o.shape != theta.shape:
            raise LayoutError(f"vector shape {o.shape} != params shape {theta.shape}")


def adamw_step(params: np.ndarray, grad: np.ndarray, state: AdamWState,
               lr: float) -> tuple[np.ndarray, AdamWState]:
    """One AdamW step with bias correction and decoupled weight decay."""
    _check_layout(params, grad, state.first_moment, state.second_moment)
    if lr < 0:
        raise ValueError("lr must be >= 0")
    h = state.hyper
    t = state.step_count + 1
    m = h.beta1 * state.first_moment + (1.0 - h.beta1) * grad
    v = h.beta2 * state.second_moment + (1.0 - h.beta2) * grad ** 2
    m_hat = m / (1.0 - h.beta1 ** t)
    v_hat = v / (1.0 - h.beta2 ** t)
    new = params - lr * (m_hat / (np.sqrt(v_hat) + h.eps)) - lr * h.weight_decay * params
    return new, AdamWState(m, v, t, h)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Plain SGD: theta - lr * grad. Basis of the exact DDP-equivalence tests."""
    _check_layout(params, grad)
    return params - lr * grad


def nesterov_step(params: np.ndarray, pseudo_grad: np.ndarray,
                  state: NesterovState) -> tuple[np.ndarray, NesterovState]:
    """Nesterov momentum in the v' = mu*v + g, theta' = theta - lr*(g + mu*v')
    form used by the mainstream framework implementations."""
    _check_layout(params, pseudo_grad, state.velocity)
    h = state.hyper
    v = h.momentum * state.velocity + pseudo_grad
    new = params - h.lr * (pseudo_grad + h.momentum * v)
    return new, NesterovState(v, h)

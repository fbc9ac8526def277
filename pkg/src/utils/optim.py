"""
AdamW: Adam with decoupled weight decay.

    m_t = β1 * m_{t-1} + (1 - β1) * g_t
    v_t = β2 * v_{t-1} + (1 - β2) * g_t²
    θ_t = θ_{t-1} - lr * λ * θ_{t-1} - lr * m̂_t / (√v̂_t + ε)

with bias-corrected moments m̂_t = m_t / (1 - β1^t), v̂_t = v_t / (1 - β2^t).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from src.utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """Optimizer hyperparameters plus per-parameter first/second moments"""
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0.0:
            raise ConfigError(f"Invalid learning rate: {self.lr}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigError(f"Invalid beta1: {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"Invalid beta2: {self.beta2}")
        if self.eps < 0.0:
            raise ConfigError(f"Invalid epsilon: {self.eps}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"Invalid weight decay: {self.weight_decay}")


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamWState,
) -> Tuple[Dict[str, np.ndarray], AdamWState]:
    """Apply one AdamW update in place and return (params, state)"""
    state.step += 1
    t = state.step
    bias_correction1 = 1.0 - state.beta1 ** t
    bias_correction2 = 1.0 - state.beta2 ** t

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"adamw_step[{name}]", param.shape, grad.shape)

        exp_avg = state.exp_avg.get(name)
        if exp_avg is None:
            exp_avg = np.zeros_like(param)
            state.exp_avg[name] = exp_avg
        exp_avg_sq = state.exp_avg_sq.get(name)
        if exp_avg_sq is None:
            exp_avg_sq = np.zeros_like(param)
            state.exp_avg_sq[name] = exp_avg_sq

        exp_avg *= state.beta1
        exp_avg += (1.0 - state.beta1) * grad
        exp_avg_sq *= state.beta2
        exp_avg_sq += (1.0 - state.beta2) * grad * grad

        if state.weight_decay:
            param -= state.lr * state.weight_decay * param

        denom = np.sqrt(exp_avg_sq / bias_correction2) + state.eps
        param -= state.lr * (exp_avg / bias_correction1) / denom

    return params, state

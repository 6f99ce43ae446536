"""
Optimization
Bias-corrected Adam and the cosine annealing schedule
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from highfm import config
from highfm.errors import ShapeError
from highfm.numerics.layers import Module


class AdamConfig(BaseModel):
    lr: float = Field(default=config.LEARNING_RATE, gt=0)
    betas: Tuple[float, float] = config.ADAM_BETAS
    eps: float = Field(default=config.ADAM_EPS, ge=0)
    weight_decay: float = Field(default=0.0, ge=0)

    @field_validator("betas")
    @classmethod
    def _unit_interval(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if not all(0.0 <= b < 1.0 for b in value):
            raise ValueError(f"betas must lie in [0, 1), got {value}")
        return value


@dataclass(frozen=True)
class AdamState:
    """Moment buffers keyed by parameter name, plus the number of updates taken."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: Optional[AdamConfig] = None,
    lr: Optional[float] = None,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Inputs are not modified. Parameters without a gradient keep their value
    and moments.

    Returns:
        (updated parameters, new state)
    """
    cfg = cfg or AdamConfig()
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    new_params: Dict[str, np.ndarray] = {}
    m_out = dict(state.m)
    v_out = dict(state.v)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m_prev = state.m.get(name, np.zeros_like(p))
        v_prev = state.v.get(name, np.zeros_like(p))
        m = b1 * m_prev + (1.0 - b1) * g
        v = b2 * v_prev + (1.0 - b2) * g * g
        m_out[name], v_out[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_params[name] = (p - update).astype(p.dtype)
    return new_params, AdamState(step=t, m=m_out, v=v_out)


def cosine_lr(step: int, total_steps: int, lr_max: float = config.LEARNING_RATE, lr_min: float = 0.0) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2"""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Applies adam_step to a module's parameters in place."""

    def __init__(self, model: Module, cfg: Optional[AdamConfig] = None):
        self.model = model
        self.cfg = cfg or AdamConfig()
        self.lr = self.cfg.lr
        self.state = AdamState()

    def step(self) -> None:
        named = dict(self.model.named_parameters())
        params = {name: p.data for name, p in named.items()}
        grads = {name: p.grad for name, p in named.items() if p.grad is not None}
        updated, self.state = adam_step(params, grads, self.state, self.cfg, self.lr)
        for name, p in named.items():
            p.data[...] = updated[name]

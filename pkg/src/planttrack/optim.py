from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from planttrack.errors import ValidationError
from planttrack.net import NetworkParams


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.name!r}")
        if not self.lr > 0:
            raise ValidationError("learning rate must be > 0")


@dataclass
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(
    params: NetworkParams, grads: NetworkParams, state: OptimizerState, cfg: OptimizerConfig
) -> tuple[NetworkParams, OptimizerState]:
    """One SGD or Adam update. Moments are kept in float64; params keep their dtype."""
    theta, g = params.arrays(), grads.arrays()
    if [a.shape for a in theta] != [b.shape for b in g]:
        raise ValidationError("parameter and gradient shapes differ")
    if cfg.name == "sgd":
        new = [(a - cfg.lr * b.astype(np.float64)).astype(a.dtype) for a, b in zip(theta, g)]
        return params.with_arrays(new), OptimizerState(state.step + 1)

    t = state.step + 1
    m = state.m or [np.zeros(a.shape) for a in theta]
    v = state.v or [np.zeros(a.shape) for a in theta]
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new, new_m, new_v = [], [], []
    for a, b, mi, vi in zip(theta, g, m, v):
        b = b.astype(np.float64)
        mi = cfg.beta1 * mi + (1.0 - cfg.beta1) * b
        vi = cfg.beta2 * vi + (1.0 - cfg.beta2) * b * b
        upd = cfg.lr * (mi / bc1) / (np.sqrt(vi / bc2) + cfg.eps)
        new.append((a - upd).astype(a.dtype))
        new_m.append(mi)
        new_v.append(vi)
    return params.with_arrays(new), OptimizerState(t, new_m, new_v)

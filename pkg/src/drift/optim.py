"""Pure parameter-update rules (Adam with bias correction, SGD with momentum)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from drift.models import ParamSet

KINDS = ("adam", "sgd_momentum")


@dataclass(frozen=True)
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    step_count: int = 0
    # first/second moments for adam, velocity (in m) for sgd_momentum
    m: Optional[ParamSet] = field(default=None, repr=False)
    v: Optional[ParamSet] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def init_state(params: ParamSet, kind: str = "adam", learning_rate: float = 0.01,
               **kwargs) -> OptimizerState:
    zeros = params.map(np.zeros_like)
    return OptimizerState(kind=kind, learning_rate=learning_rate, m=zeros,
                          v=zeros if kind == "adam" else None, **kwargs)


def apply(state: OptimizerState, params: ParamSet, grads: ParamSet) -> Tuple[OptimizerState, ParamSet]:
    """One update step. Returns the new state and parameters; inputs are untouched."""
    params.check_compatible(grads)
    m = state.m if state.m is not None else params.map(np.zeros_like)
    m.check_compatible(params)
    t = state.step_count + 1
    lr = state.learning_rate

    if state.kind == "sgd_momentum":
        u = m.combine(grads, lambda u_, g: state.momentum * u_ + g)
        new_params = params.combine(u, lambda p, u_: p - lr * u_)
        return replace(state, step_count=t, m=u), new_params

    v = state.v if state.v is not None else params.map(np.zeros_like)
    b1, b2 = state.beta1, state.beta2
    m = m.combine(grads, lambda m_, g: b1 * m_ + (1.0 - b1) * g)
    v = v.combine(grads, lambda v_, g: b2 * v_ + (1.0 - b2) * g * g)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params = ParamSet({
        k: params[k] - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
        for k in params
    })
    return replace(state, step_count=t, m=m, v=v), new_params

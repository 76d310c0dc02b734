"""Optimizers: constant-LR SGD, bias-corrected Adam with explicit moment reset,
and a linear-to-zero learning-rate schedule.

States are immutable values; every step returns a new state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ScheduleExhausted
from .numerics import ParamVector


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")


def sgd_step(params: ParamVector, grad: ParamVector, config: SgdConfig) -> ParamVector:
    params.check_compatible(grad)
    return params.with_values(params.values - config.learning_rate * grad.values)


@dataclass(frozen=True)
class AdamState:
    m: ParamVector
    v: ParamVector
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, like: ParamVector, beta1=0.9, beta2=0.999, epsilon=1e-5) -> "AdamState":
        return cls(like.zeros_like(), like.zeros_like(), 0, beta1, beta2, epsilon)

    def is_fresh(self) -> bool:
        return (
            self.step_count == 0
            and not np.any(self.m.values)
            and not np.any(self.v.values)
        )


def adam_step(
    params: ParamVector, grad: ParamVector, state: AdamState, lr: float
) -> tuple[ParamVector, AdamState]:
    params.check_compatible(grad)
    params.check_compatible(state.m)
    params.check_compatible(state.v)
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    g = grad.values
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = b1 * state.m.values + (1.0 - b1) * g
    v = b2 * state.v.values + (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = replace(state, m=state.m.with_values(m), v=state.v.with_values(v), step_count=t)
    return params.with_values(new_values), new_state


def reset_moments(state: AdamState) -> AdamState:
    return replace(state, m=state.m.zeros_like(), v=state.v.zeros_like(), step_count=0)


@dataclass(frozen=True)
class LinearSchedule:
    """``lr(t) = initial_lr * (1 - t / total_rounds)``, hitting zero at the end."""

    initial_lr: float
    total_rounds: int

    def __post_init__(self):
        if not self.initial_lr >= 0:
            raise ValueError("initial_lr must be non-negative")
        if self.total_rounds < 1:
            raise ValueError("total_rounds must be positive")


def schedule_lr(schedule: LinearSchedule, round: int) -> float:
    if round < 0:
        raise ValueError("round must be non-negative")
    if round > schedule.total_rounds:
        raise ScheduleExhausted(
            f"round {round} beyond schedule of {schedule.total_rounds} rounds"
        )
    return schedule.initial_lr * (1.0 - round / schedule.total_rounds)

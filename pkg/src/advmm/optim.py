"""Adam optimizer and the adaptation-factor schedule."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters without an entry in ``grads`` are left alone. Gradients are
    checked for finiteness before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class LambdaSchedule:
    """lambda(p) = 2 / (1 + exp(-gamma * p)) - 1 with p = step / max_steps.

    ``constant`` overrides the schedule (ablations).
    """
    max_steps: int
    gamma: float = 10.0
    constant: float | None = None

    def __call__(self, step: int) -> float:
        return lambda_at(self, step)


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    if schedule.constant is not None:
        return float(schedule.constant)
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step > schedule.max_steps:
        warnings.warn(f"step {step} beyond max_steps {schedule.max_steps}; clamping p to 1")
        step = schedule.max_steps
    p = step / schedule.max_steps
    return 2.0 / (1.0 + math.exp(-schedule.gamma * p)) - 1.0

"""Classical (heavy-ball) momentum SGD and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from deskpaws.autodiff import Node, ShapeError
from deskpaws.encoder import ConfigError


@dataclass
class LrSchedule:
    start_lr: float
    peak_lr: float
    final_lr: float
    warmup_steps: int
    total_steps: int

    @classmethod
    def from_epochs(cls, start_lr, peak_lr, final_lr, warmup_epochs, total_epochs, steps_per_epoch):
        return cls(start_lr, peak_lr, final_lr, round(warmup_epochs * steps_per_epoch), total_epochs * steps_per_epoch)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup start -> peak, then cosine decay peak -> final."""
    if step < 0:
        raise ValueError("step must be non-negative")
    s = schedule
    if step < s.warmup_steps:
        return s.start_lr + (s.peak_lr - s.start_lr) * step / s.warmup_steps
    decay = s.total_steps - s.warmup_steps
    if step >= s.total_steps or decay <= 0:
        return s.final_lr if step >= s.total_steps else s.peak_lr
    progress = (step - s.warmup_steps) / decay
    return s.final_lr + (s.peak_lr - s.final_lr) * (1 + math.cos(math.pi * progress)) / 2


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 1e-6
    step_count: int = 0
    excluded: set[int] = field(default_factory=set)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")


def exclusion_policy(params) -> set[int]:
    """Ids of parameters exempt from weight decay: every bias."""
    return params.bias_ids()


def init_state(params, momentum=0.9, weight_decay=1e-6) -> OptimizerState:
    nodes = params.parameters()
    return OptimizerState([np.zeros_like(p.value) for p in nodes], momentum, weight_decay, 0, exclusion_policy(params))


def step(params: list[Node], grads: list[np.ndarray], state: OptimizerState, lr: float) -> None:
    """v <- beta*v - lr*(g + wd*theta);  theta <- theta + v  (in place)."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ShapeError("params, grads and velocity lists differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.value.shape}")
        if state.weight_decay and id(p) not in state.excluded:
            g = g + state.weight_decay * p.value
        v = state.velocity[i]
        v *= state.momentum
        v -= lr * g
        p.value += v
    state.step_count += 1


def framework_momentum_step(theta, v, grad, lr, momentum):
    """The variant used by common frameworks: v <- beta*v + g; theta <- theta - lr*v.

    Kept only as a reference recurrence for comparison tests.
    """
    v = momentum * v + grad
    return theta - lr * v, v

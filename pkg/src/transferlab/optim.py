"""Optimizers (SGD with momentum, Adam) and step-indexed learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LrSchedule:
    """Learning rate as a pure function of the global step.

    kind "constant": base_lr everywhere.
    kind "warmup_step": linear ramp 0 -> base_lr over ``warmup_epochs`` epochs
    (lr(0) = 0, lr(warmup_end) = base_lr), then divide by ``decay_factor`` at
    each epoch in ``decay_epochs``. Epochs convert to steps via
    ``steps_per_epoch``.
    """

    kind: str = "constant"
    base_lr: float = 1e-3
    warmup_epochs: float = 0.0
    decay_epochs: tuple[float, ...] = ()
    decay_factor: float = 10.0
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "warmup_step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be sorted")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Evaluate the schedule at an integer global step (continuous at the
    warmup boundary; non-increasing afterwards)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.kind == "constant":
        return schedule.base_lr
    warmup_steps = schedule.warmup_epochs * schedule.steps_per_epoch
    if warmup_steps > 0 and step <= warmup_steps:
        return schedule.base_lr * (step / warmup_steps)
    epoch = step / schedule.steps_per_epoch
    n_decays = sum(1 for d in schedule.decay_epochs if epoch >= d)
    lr = schedule.base_lr
    for _ in range(n_decays):
        lr = lr / schedule.decay_factor
    return lr


@dataclass
class OptimizerState:
    """Slot buffers plus a global step counter shared by all parameters."""

    kind: str  # "sgd" | "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _slot(state, name, param, key):
    bank = state.slots.setdefault(name, {})
    if key not in bank:
        bank[key] = np.zeros_like(param)
    buf = bank[key]
    if buf.shape != param.shape:
        raise ValueError(f"slot/param shape mismatch for {name}: {buf.shape} vs {param.shape}")
    return buf


def optimizer_step(state: OptimizerState, params: dict, grads: dict, lr: float) -> None:
    """One update, in place on the arrays in ``params``.

    Only names present in ``grads`` are touched, which is how frozen tensors
    stay bitwise identical. Updates run in the parameter dtype.
    """
    state.step += 1
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"grad/param shape mismatch for {name}: {g.shape} vs {p.shape}")
        g = g.astype(p.dtype, copy=False)
        if state.kind == "sgd":
            v = _slot(state, name, p, "v")
            v *= state.momentum
            v += g
            p -= np.asarray(lr * v, dtype=p.dtype)
        else:
            m = _slot(state, name, p, "m")
            v = _slot(state, name, p, "v")
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
            mhat = m / (1.0 - state.beta1 ** state.step)
            vhat = v / (1.0 - state.beta2 ** state.step)
            p -= np.asarray(lr * mhat / (np.sqrt(vhat) + state.epsilon), dtype=p.dtype)

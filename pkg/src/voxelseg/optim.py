"""AdaBelief optimizer and the two-phase learning-rate schedule.

AdaBelief tracks a first moment m and a "belief" second moment s of the
deviation (g - m); both are bias-corrected before the update.  Constants
default to beta1=0.9, beta2=0.999, eps=1e-8, no weight decay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(RuntimeError):
    """A gradient contained NaN/inf; the optimizer step was aborted."""


@dataclass
class AdaBeliefState:
    m: dict = field(default_factory=dict)   # first moment per parameter
    s: dict = field(default_factory=dict)   # belief second moment per parameter
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_state(params, beta1=0.9, beta2=0.999, eps=1e-8):
    state = AdaBeliefState(beta1=beta1, beta2=beta2, eps=eps)
    for name, arr in params.items():
        state.m[name] = np.zeros_like(arr)
        state.s[name] = np.zeros_like(arr)
    return state


def adabelief_step(params, grads, state, lr):
    """One in-place update of every parameter.

        m <- b1*m + (1-b1)*g
        s <- b2*s + (1-b2)*(g-m)^2 + eps
        theta <- theta - lr * (m / (1-b1^t)) / (sqrt(s / (1-b2^t)) + eps)

    Raises NonFiniteGradient before touching anything if any gradient is
    not finite.  With lr=0 the parameters stay bit-identical while the
    moments still advance.
    """
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        m, s = state.m[name], state.s[name]
        m *= b1
        m += (1.0 - b1) * g
        diff = g - m
        s *= b2
        s += (1.0 - b2) * diff * diff + eps
        if lr > 0.0:
            theta -= lr * (m / c1) / (np.sqrt(s / c2) + eps)
    return params, state


def lr_at_epoch(epoch, cfg):
    """Constant lr_start for the first half of the epochs, then a linear
    ramp reaching lr_end exactly at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    hold = cfg.epochs // 2
    if epoch < hold or cfg.epochs - hold <= 1:
        return cfg.lr_start
    frac = (epoch - hold) / (cfg.epochs - 1 - hold)
    return cfg.lr_start + frac * (cfg.lr_end - cfg.lr_start)

"""Post-privatization parameter update rules: SGD and AdamW.

Updates consume an (already noised and normalized) gradient and return the
additive parameter update plus the next optimizer state. Both rules are
pure functions; AdamW keeps its moments in GradientVectors matching the
parameter layout.

Gradient normalization (dividing the noisy sum by the expected batch size)
is the trainer's job, before the optimizer: the privatizer's output stays
an unnormalized sum so its sensitivity statement remains exact.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .models import GradientVector, Layout

ADAMW_DEFAULTS = dict(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)


def sgd_update(
    lr: float, grad: GradientVector, params: GradientVector
) -> tuple[GradientVector, None]:
    """update = -lr * grad; stateless."""
    if grad.layout != params.layout:
        raise ValueError("gradient and parameter layouts differ")
    return GradientVector(-lr * grad.values, grad.layout), None


@dataclasses.dataclass(frozen=True)
class AdamWState:
    step: int
    first_moment: GradientVector
    second_moment: GradientVector


def adamw_init(layout: Layout) -> AdamWState:
    return AdamWState(
        step=0,
        first_moment=GradientVector.zeros(layout),
        second_moment=GradientVector.zeros(layout),
    )


def adamw_update(
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
    grad: GradientVector,
    state: AdamWState,
    params: GradientVector,
) -> tuple[GradientVector, AdamWState]:
    """One AdamW step with bias correction and decoupled weight decay.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    update = -lr * ( m_hat / (sqrt(v_hat) + eps) + weight_decay * params )
    """
    if grad.layout != params.layout:
        raise ValueError("gradient and parameter layouts differ")
    t = state.step + 1
    m = beta1 * state.first_moment.values + (1.0 - beta1) * grad.values
    v = beta2 * state.second_moment.values + (1.0 - beta2) * grad.values**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    step = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * params.values
    new_state = AdamWState(
        step=t,
        first_moment=GradientVector(m, grad.layout),
        second_moment=GradientVector(v, grad.layout),
    )
    return GradientVector(-lr * step, grad.layout), new_state

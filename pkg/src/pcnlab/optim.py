"""Weight and latent optimizers: AdamW (decoupled decay) and SGD-momentum.

Parameters are dicts name -> ndarray updated in place; moment buffers are
lazily allocated to match. A NaN gradient aborts the update with the
offending parameter named, so a diverged run fails loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteGradient(RuntimeError):
    pass


@dataclass
class OptimizerState:
    kind: str  # "adamw" | "sgd-momentum"
    lr: float
    weight_decay: float = 0.0
    momentum: float = 0.0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    buffers: dict = field(default_factory=dict)  # name -> moment array(s)


def adamw_state(lr: float, weight_decay: float) -> OptimizerState:
    return OptimizerState(kind="adamw", lr=lr, weight_decay=weight_decay)


def sgd_state(lr: float, momentum: float) -> OptimizerState:
    return OptimizerState(kind="sgd-momentum", lr=lr, momentum=momentum)


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter '{name}'")


def adamw_step(state: OptimizerState, params: dict, grads: dict) -> None:
    """One AdamW update: decoupled decay, then bias-corrected Adam."""
    assert state.kind == "adamw"
    _check_finite(grads)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.buffers:
            state.buffers[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state.buffers[name]
        p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def sgd_momentum_step(state: OptimizerState, params: dict, grads: dict) -> None:
    """buffer <- momentum * buffer + grad; param <- param - lr * buffer."""
    assert state.kind == "sgd-momentum"
    _check_finite(grads)
    state.step += 1
    for name, g in grads.items():
        p = params[name]
        if name not in state.buffers:
            state.buffers[name] = np.zeros_like(p)
        buf = state.buffers[name]
        buf *= state.momentum
        buf += g
        p -= state.lr * buf

"""AdamW with decoupled weight decay and an EMA shadow of every parameter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    ema_warmup: bool = True
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    ema: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("EMA decay must lie in [0, 1)")
        if self.step < 0:
            raise ValueError("step counter must be non-negative")

    def effective_ema_decay(self) -> float:
        # warmup keeps early shadows from being dominated by the initialisation
        if not self.ema_warmup:
            return self.ema_decay
        return min(self.ema_decay, (1.0 + self.step) / (10.0 + self.step))


def init_state(params: dict[str, Tensor], **hyper) -> OptimizerState:
    state = OptimizerState(**hyper)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
        state.ema[name] = p.data.copy()
    return state


def adamw_step(params: dict[str, Tensor], state: OptimizerState, grads: dict[str, np.ndarray] | None = None) -> None:
    """One in-place AdamW update followed by the EMA shadow update.

    Parameters whose gradient is absent are left untouched, shadow included,
    so a branch that contributed nothing to the loss keeps its exact bits.
    """
    if grads is None:
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    decay = state.effective_ema_decay()
    for name, g in grads.items():
        p = params[name].data
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.lr != 0.0:
            denom = np.sqrt(v * (1.0 / bc2))
            denom += state.eps
            update = np.divide(m, denom, out=denom)
            if state.weight_decay:
                p *= 1.0 - state.lr * state.weight_decay
            p -= (state.lr / bc1) * update
        ema = state.ema.setdefault(name, p.copy())
        if decay == 0.0:
            ema[...] = p
        else:
            ema *= decay
            ema += (1.0 - decay) * p

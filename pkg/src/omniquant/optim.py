"""AdamW with bias correction, over dicts of numpy arrays."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamWState,
               lr: float | Mapping[str, float], weight_decay: float | Mapping[str, float] = 0.0
               ) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; returns new parameter arrays.

    A step whose gradients contain NaN/inf is skipped entirely (moments and
    step count untouched) and counted in ``state.skipped``.
    """
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name}")
    if not all(np.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient; skipping optimizer step %d", state.step + 1)
        return dict(params)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        step_lr = lr[name] if isinstance(lr, Mapping) else lr
        wd = weight_decay[name] if isinstance(weight_decay, Mapping) else weight_decay
        upd = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if wd:
            p = p - step_lr * wd * p
        out[name] = (p - step_lr * upd).astype(p.dtype, copy=False)
    return out


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if not np.isfinite(total) or total <= max_norm:
        return dict(grads), total
    scale = max_norm / (total + 1e-12)
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, total

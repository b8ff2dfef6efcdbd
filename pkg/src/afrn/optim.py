"""Adamax updates, the stepped learning-rate schedule and global-norm clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import ShapeError


class GradientExplosionError(FloatingPointError):
    pass


def clip_global_norm(grads: dict, max_norm: float = 0.25):
    """Scale all gradients jointly so the concatenated L2 norm is <= ``max_norm``.

    Returns ``(clipped, norm_before)``; inputs are not modified.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientExplosionError(f"non-finite gradient for {name}")
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return {k: g.copy() for k, g in grads.items()}, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


@dataclass
class AdamaxState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)


def adamax_step(params: dict, grads: dict, state: AdamaxState, lr: float) -> None:
    """One in-place Adamax update of every array in ``params`` that has a gradient."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if params[name].shape != g.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
    state.t += 1
    step = lr / (1.0 - state.beta1 ** state.t)
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.u[name] = np.zeros_like(g)
        u = state.u[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        params[name] -= step * m / (u + state.eps)


def lr_schedule(epoch: int) -> float:
    """``min(i * 1e-3, 4e-3)`` for epochs 1-10, then x0.25 every two epochs."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    if epoch <= 10:
        return min(epoch * 1e-3, 4e-3)
    if epoch <= 12:
        return 1e-3
    return 2.5e-4


def schedule_epoch(epoch: int, epoch_scale: float = 1.0) -> int:
    """Map a run's epoch index onto the schedule's epoch axis.

    ``epoch_scale`` is schedule epochs per run epoch, so a 26-epoch toy run
    with scale 0.5 walks the full 13-epoch schedule.
    """
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    return max(1, math.ceil(epoch * epoch_scale - 1e-9))

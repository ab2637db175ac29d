"""Learning-rate schedule, inner optimizers and BMUF synchronization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..model.params import ModelParams


def lr_at(config, processed_batches: int, total_batches: int) -> float:
    """Log-linear decay from ``initial_lr`` to ``final_lr`` over training."""
    if total_batches <= 0:
        raise ValueError("total_batches must be positive")
    if not 0 <= processed_batches <= total_batches:
        raise ValueError(f"processed_batches {processed_batches} outside [0, {total_batches}]")
    if processed_batches == 0:
        return float(config.initial_lr)
    if processed_batches == total_batches:
        return float(config.final_lr)
    frac = processed_batches / total_batches
    return float(config.initial_lr * math.exp(frac * math.log(config.final_lr / config.initial_lr)))


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``
    (0 disables).  Returns the norm before clipping."""
    sq = 0.0
    for t in params.values():
        if t.grad is not None:
            sq += float(np.sum(np.square(t.grad, dtype=np.float64)))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad = (t.grad * scale).astype(t.grad.dtype)
    return norm


class SGD:
    def __init__(self, momentum: float = 0.0):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, lr: float) -> None:
        for name, t in params.items():
            if t.grad is None:
                continue
            g = t.grad
            if self.momentum:
                v = self.velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            t.data = (t.data - lr * g).astype(t.data.dtype)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: ModelParams, lr: float) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for name, t in params.items():
            if t.grad is None:
                continue
            g = t.grad.astype(np.float64)
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.data = (t.data - update).astype(t.data.dtype)


def make_optimizer(config):
    if config.optimizer == "adam":
        return Adam()
    return SGD(config.momentum)


# ------------------------------------------------------------------- BMUF


@dataclass
class BmufState:
    """Block-level momentum buffer, one float64 array per parameter."""

    delta: dict[str, np.ndarray] = field(default_factory=dict)
    syncs: int = 0


def bmuf_sync(
    global_params: ModelParams,
    worker_params: Sequence[ModelParams],
    block_momentum: float,
    block_lr: float,
    state: BmufState,
) -> None:
    """One synchronization, in place.

    ``G = mean_w(worker - global)``, ``delta = block_momentum * delta +
    block_lr * G``, ``global += delta``; every worker then restarts from the
    Nesterov look-ahead ``global + block_momentum * delta`` (one shared
    array, so the workers are bit-identical).
    """
    if not worker_params:
        raise ValueError("bmuf_sync needs at least one worker")
    names = set(global_params)
    for i, wp in enumerate(worker_params):
        if set(wp) != names:
            missing = sorted(names ^ set(wp))
            raise KeyError(f"worker {i} parameter set differs from the global model: {missing[:5]}")
    for name, gt in global_params.items():
        g = gt.data.astype(np.float64)
        G = np.mean([wp[name].data.astype(np.float64) - g for wp in worker_params], axis=0)
        delta = block_momentum * state.delta.get(name, 0.0) + block_lr * G
        state.delta[name] = delta
        gt.data = (g + delta).astype(gt.data.dtype)
        start = (gt.data.astype(np.float64) + block_momentum * delta).astype(gt.data.dtype)
        for wp in worker_params:
            wp[name].data = start.copy()
    state.syncs += 1

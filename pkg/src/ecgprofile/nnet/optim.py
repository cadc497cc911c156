from __future__ import annotations

import math

import numpy as np

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


class TrainingError(RuntimeError):
    pass


def adamw_step(params: dict, grads: dict, state: dict, step: int, lr: float, wd: float,
               beta1=BETA1, beta2=BETA2, eps=EPS) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``step`` is the 1-based update count used for bias correction; ``state``
    maps parameter names to ``(m, v)`` and is created on first use.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(f"non-finite gradient for {name} ({bad} entries) at step {step}")
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, g in grads.items():
        p = params[name]
        m, v = state.get(name) or (np.zeros_like(p), np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        state[name] = (m, v)
        p -= (lr * wd) * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    step = min(max(step, 0), total_steps)
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when to stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.stale = loss, epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.stale == 0

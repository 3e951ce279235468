"""Adam with bias correction and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """A gradient entry is NaN or infinite; ``term`` names the loss term if known."""

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **kw)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              term: str | None = None) -> np.ndarray:
    """One Adam update. Mutates ``state`` and returns the new parameter vector.

    A non-finite gradient leaves both state and parameters untouched.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"layout mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NonFiniteGradientError(f"{bad} non-finite gradient entries"
                                     + (f" from loss term {term!r}" if term else ""), term)
    b1, b2 = state.beta1, state.beta2
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    failed to improve on its best value (by a relative ``threshold``) for
    ``patience`` consecutive epochs."""

    factor: float = 0.5
    patience: int = 50
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = math.inf
    num_bad: int = 0
    reductions: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def step(self, loss: float, lr: float) -> float:
        """Return the (possibly reduced) learning rate after observing ``loss``."""
        if not math.isfinite(loss):
            raise ValueError("scheduler needs a finite loss")
        if self.best > 0:
            improved = loss < self.best * (1.0 - self.threshold)
        else:
            improved = loss < self.best
        if improved:
            self.best = loss
            self.num_bad = 0
            return lr
        self.num_bad += 1
        if self.num_bad >= self.patience:
            self.num_bad = 0
            # never raise a rate that already sits below the floor
            new_lr = min(lr, max(lr * self.factor, self.min_lr))
            if new_lr < lr:
                self.reductions.append(new_lr)
            return new_lr
        return lr


def scheduler_step(sched: PlateauScheduler, state: AdamState, epoch_loss: float) -> float:
    state.lr = sched.step(epoch_loss, state.lr)
    return state.lr

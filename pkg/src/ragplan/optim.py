"""Adaptive moment estimation over flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


def adam_step(
    params: np.ndarray, grad: np.ndarray, state: AdamState, learning_rate: float
) -> np.ndarray:
    """One Adam update; mutates ``state`` and returns the new parameters."""
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class ReturnBaseline:
    """Running mean over the most recent returns, used to reduce variance."""

    window: int = 64
    values: list[float] = field(default_factory=list)

    def value(self) -> float:
        if not self.values:
            return 0.0
        return float(np.mean(self.values))

    def update(self, value: float) -> None:
        self.values.append(float(value))
        if len(self.values) > self.window:
            del self.values[: len(self.values) - self.window]

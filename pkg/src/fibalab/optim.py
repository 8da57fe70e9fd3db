"""Adam with bias-corrected moments and optional L2 weight decay."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None


def adam_step(params, grad, state):
    """One Adam update; returns the new parameter array and advances ``state``."""
    p = params.data if isinstance(params, Tensor) else np.asarray(params, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    if state.m is None:
        state.m = np.zeros_like(p)
        state.v = np.zeros_like(p)
    elif state.m.shape != p.shape:
        raise DimensionError(f"moment shape {state.m.shape} != parameter shape {p.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    """Adam over a list of tensors, updated in place from their ``.grad``."""

    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0   # L2 term added to the gradient, as in classic Adam
    states: list = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        self.states = [AdamState(self.lr, self.beta1, self.beta2, self.eps) for _ in self.params]

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for p, g, st in zip(self.params, grads, self.states):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data = adam_step(p, g, st)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

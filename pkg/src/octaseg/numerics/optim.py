from dataclasses import dataclass, field

import numpy as np


@dataclass
class Param:
    """A trainable array paired with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ValueError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, **hyper):
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), **hyper)


def adam_step(param, state):
    """Apply one bias-corrected Adam update to ``param`` in place."""
    g = param.grad
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


@dataclass
class Adam:
    """Adam over a name -> Param mapping; states are created lazily."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def step(self, params):
        for name, p in params.items():
            st = self.states.get(name)
            if st is None:
                st = AdamState.for_param(
                    p, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps
                )
                self.states[name] = st
            adam_step(p, st)

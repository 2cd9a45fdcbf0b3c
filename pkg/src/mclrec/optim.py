"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientError, Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam over a name -> Tensor mapping.

    ``step`` applies one bias-corrected update and then zeroes every grad.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)
        for name, p in self.params.items():
            self.state.first_moment[name] = np.zeros_like(p.data)
            self.state.second_moment[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise GradientError(f"adam_step: no gradient for {missing[:5]}")
        st = self.state
        st.step_count += 1
        t = st.step_count
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = st.first_moment[name]
            v = st.second_moment[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p.data -= st.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + st.epsilon)
        self.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array(self.state.step_count)}
        for name in self.params:
            out[f"adam.m.{name}"] = self.state.first_moment[name]
            out[f"adam.v.{name}"] = self.state.second_moment[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step_count = int(arrays["adam.step"])
        for name in self.params:
            self.state.first_moment[name] = np.array(arrays[f"adam.m.{name}"], dtype=np.float64)
            self.state.second_moment[name] = np.array(arrays[f"adam.v.{name}"], dtype=np.float64)

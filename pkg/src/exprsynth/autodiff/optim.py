"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-4

    @classmethod
    def zeros_like(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros(param.shape), np.zeros(param.shape), **hyper)


def adam_step(state: AdamState, param: Tensor, grad: np.ndarray) -> None:
    """Apply one Adam update to ``param`` in place of its data array."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * np.square(grad)
    step = state.lr / (1.0 - b1**state.t)
    denom = np.sqrt(state.v / (1.0 - b2**state.t))
    denom += state.eps
    update = state.m * step
    update /= denom
    # rebind rather than mutate: recorded tapes may still reference the old array
    param.data = param.data - update


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class Adam:
    """Adam over a named, ordered parameter list."""

    params: list[tuple[str, Tensor]]
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        hyper = dict(beta1=self.beta1, beta2=self.beta2, eps=self.eps, lr=self.lr)
        self.states = [AdamState.zeros_like(p, **hyper) for _, p in self.params]

    @property
    def tensors(self) -> list[Tensor]:
        return [p for _, p in self.params]

    def step(self, grads: list[np.ndarray]) -> None:
        for (_, p), state, g in zip(self.params, self.states, grads):
            adam_step(state, p, g)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for (name, _), st in zip(self.params, self.states):
            out[f"{prefix}/{name}/m"] = st.m
            out[f"{prefix}/{name}/v"] = st.v
            out[f"{prefix}/{name}/t"] = np.asarray(float(st.t))
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for (name, _), st in zip(self.params, self.states):
            st.m = arrays[f"{prefix}/{name}/m"].copy()
            st.v = arrays[f"{prefix}/{name}/v"].copy()
            st.t = int(arrays[f"{prefix}/{name}/t"])

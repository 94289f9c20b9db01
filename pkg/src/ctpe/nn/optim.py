"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Adam:
    """Standard Adam: decaying first/second moment estimates, bias-corrected.

    Moments are allocated lazily per parameter name on first use and kept
    in the parameters' dtype.
    """

    def __init__(self, learning_rate: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """One in-place update of every parameter present in ``grads``."""
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p -= (self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(p.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Optimizer state as named tensors for checkpointing."""
        out: dict[str, np.ndarray] = {"adam.step": np.asarray([float(self.step_count)], dtype=np.float32)}
        for name, m in self.m.items():
            out[f"adam.m.{name}"] = m
        for name, v in self.v.items():
            out[f"adam.v.{name}"] = v
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], params: dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors["adam.step"][0])
        self.m = {}
        self.v = {}
        for name, p in params.items():
            m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
            if m_key in tensors:
                self.m[name] = tensors[m_key].astype(p.dtype).reshape(p.shape)
                self.v[name] = tensors[v_key].astype(p.dtype).reshape(p.shape)

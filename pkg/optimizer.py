"""
AdamW over Tensor leaves: adaptive moments with decoupled weight decay.
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from tensor import Tensor

logger = logging.getLogger(__name__)


class AdamW:
    """Adam with weight decay applied directly to the parameters."""

    def __init__(self, parameters: Sequence[Tensor], lr: float = 1e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        if lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"Betas must lie in [0, 1), got ({beta1}, {beta2})")
        self.parameters: List[Tensor] = list(parameters)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

        # Moment estimates
        self.m = [np.zeros_like(p.data) for p in self.parameters]
        self.v = [np.zeros_like(p.data) for p in self.parameters]

    def step(self, gradients: Optional[Dict[Tensor, np.ndarray]] = None):
        """Apply one update; gradients default to each parameter's `grad`."""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t

        for i, param in enumerate(self.parameters):
            grad = gradients.get(param) if gradients is not None else param.grad
            if grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad * grad

            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2

            # In place so that modules holding the Tensor see the update
            param.data *= (1.0 - self.lr * self.weight_decay)
            param.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for param in self.parameters:
            param.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moment buffers as named arrays for checkpoint files."""
        state = {'adamw.t': np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f'adamw.m.{i}'] = m
            state[f'adamw.v.{i}'] = v
        return state

    def load_state_arrays(self, state: Dict[str, np.ndarray]):
        self.t = int(state['adamw.t'])
        for i in range(len(self.parameters)):
            self.m[i] = np.array(state[f'adamw.m.{i}'], dtype=np.float64)
            self.v[i] = np.array(state[f'adamw.v.{i}'], dtype=np.float64)
        logger.debug(f"Restored optimizer state at step {self.t}")

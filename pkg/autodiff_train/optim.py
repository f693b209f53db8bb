import logging

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)


class Adam:
    """Adaptive-moment optimizer over a dict of named arrays"""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0 or eps <= 0:
            raise ValidationError(f'Learning rate and epsilon must be positive, got {lr} and {eps}')
        self.lr = lr
        self.beta_1, self.beta_2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Return updated copies of ``params``; the inputs are left untouched"""
        self.t += 1
        updated = {}
        for name, value in params.items():
            gradient = grads[name]
            m = self.m.get(name, np.zeros_like(value))
            v = self.v.get(name, np.zeros_like(value))
            m = self.beta_1 * m + (1 - self.beta_1) * gradient
            v = self.beta_2 * v + (1 - self.beta_2) * gradient ** 2
            self.m[name], self.v[name] = m, v

            m_hat = m / (1 - self.beta_1 ** self.t)
            v_hat = v / (1 - self.beta_2 ** self.t)
            updated[name] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated

    def state_dict(self):
        return {
            't': self.t,
            'm': {k: v.tolist() for k, v in self.m.items()},
            'v': {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.t = int(state['t'])
        self.m = {k: np.array(v, dtype=float) for k, v in state['m'].items()}
        self.v = {k: np.array(v, dtype=float) for k, v in state['v'].items()}

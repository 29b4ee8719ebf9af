"""AdamW optimiser with decoupled weight decay.

Weight decay multiplies the parameter directly by ``lr * weight_decay``
instead of being folded into the gradient, so decay strength does not get
rescaled by the adaptive denominator.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import ConfigError, NumericError


class AdamW:
    """Holds first/second moment buffers per parameter, keyed by identity.

    Parameters are ``(name, Tensor)`` pairs; names are only used in error
    messages and state export.
    """

    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.01):
        if not (0.0 < lr):
            raise ConfigError(f"lr must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {eps}")
        if weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.params = list(named_params)
        if not self.params:
            raise ConfigError("optimiser needs at least one parameter")
        self.step_count = 0
        self._m = [np.zeros_like(t.data) for _, t in self.params]
        self._v = [np.zeros_like(t.data) for _, t in self.params]

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None

    def step(self):
        """Apply one update; every parameter must carry a gradient."""
        self.step_count += 1
        for (name, t), m, v in zip(self.params, self._m, self._v):
            if t.grad is None:
                raise ConfigError(f"parameter '{name}' has no gradient")
            g = np.ascontiguousarray(t.grad, dtype=t.data.dtype)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            K.adamw_update(t.data, g, m, v, self.lr, self.beta1, self.beta2,
                           self.eps, self.weight_decay, self.step_count)

    def state_summary(self):
        return {
            "step": self.step_count,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "n_params": len(self.params),
        }

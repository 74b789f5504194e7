"""Adam and global-norm gradient clipping over name -> array maps."""
from __future__ import annotations

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads, cap: float):
    """Scale all gradients by ``cap / norm`` when the joint L2 norm exceeds ``cap``.

    Returns ``(clipped, norm_before)``.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    norm = global_norm(grads)
    if norm <= cap:
        return dict(grads), norm
    scale = cap / norm
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    """Bias-corrected Adam acting in place on a dict of parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter "
                                 f"{name!r} {self.params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = self.params[name]
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        out = {"adam.t": np.array([float(self.t)])}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state):
        self.t = int(state["adam.t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"adam.m.{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(state[f"adam.v.{k}"], dtype=self.params[k].data.dtype)

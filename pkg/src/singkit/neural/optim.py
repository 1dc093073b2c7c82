"""Adam with bias correction and the inverse-square-root warmup schedule."""
from __future__ import annotations

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


def noam_lr(step, model_dim, warmup):
    """Linear warmup for ``warmup`` steps, then decay as ``step ** -0.5``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam over a list of ``(name, Parameter)`` pairs.

    The step is aborted (no parameter touched) if any gradient is non-finite.
    """

    def __init__(self, named_params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = [(n, p) for n, p in named_params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for _, p in self.params]
        self.v = [np.zeros_like(p.value) for _, p in self.params]
        self.step_count = 0

    def step(self, lr):
        for name, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"step": self.step_count, "m": [m.copy() for m in self.m],
                "v": [v.copy() for v in self.v]}


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.98, eps=1e-9):
    """Functional Adam step on plain arrays; returns ``(new_params, new_state)``.

    ``state`` is ``None`` or a dict with ``step``, ``m`` and ``v`` lists.
    """
    if state is None:
        state = {"step": 0, "m": [np.zeros_like(p) for p in params],
                 "v": [np.zeros_like(p) for p in params]}
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {i}")
    t = state["step"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"step": t, "m": new_m, "v": new_v}

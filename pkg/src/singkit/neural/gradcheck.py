"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

DENOM_FLOOR = 1e-6


def grad_check(loss_and_backward, loss_only, params, eps=1e-5, samples=20, seed=0):
    """Maximum relative error between analytic and numeric gradients.

    ``loss_and_backward()`` must zero the gradients, run forward and backward,
    and return the loss; ``loss_only()`` runs forward only. ``params`` is a
    list of ``(name, Parameter)``. Up to ``samples`` coordinates are checked
    per parameter. Returns ``(max_error, worst_name)``; a non-finite
    comparison counts as an infinite error.
    """
    rng = np.random.default_rng(seed)
    loss_and_backward()
    analytic = {name: p.grad.copy() for name, p in params}
    worst, worst_name = 0.0, None
    for name, p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        idx = rng.choice(n, size=min(samples, n), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            plus = loss_only()
            flat[i] = old - eps
            minus = loss_only()
            flat[i] = old
            numeric = (plus - minus) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), DENOM_FLOOR)
            if not np.isfinite(err):
                err = np.inf
            if err > worst or worst_name is None:
                worst, worst_name = err, name
    return worst, worst_name

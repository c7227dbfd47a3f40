"""Finite-difference verification of the hand-written gradients."""

from __future__ import annotations

import numpy as np


def numerical_grad(loss_fn, params, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. each array in ``params``
    (perturbed in place and restored)."""
    grads = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    # floor keeps entries that are zero up to round-off (dead ReLUs) from
    # dividing by ~0
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def grad_check(params, loss_and_grads, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads()`` must return ``(loss, grads)`` for the current values
    of ``params``.
    """
    _, analytic = loss_and_grads()
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    numeric = numerical_grad(lambda: loss_and_grads()[0], params, h)
    return relative_error(analytic, numeric)

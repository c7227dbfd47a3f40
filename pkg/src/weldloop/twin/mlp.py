"""Small fully connected ReLU networks with hand-written backprop."""

from __future__ import annotations

import numpy as np


class MLP:
    """Dense ReLU network; the last layer is linear.

    Parameters are stored as a flat list ``[W0, b0, W1, b1, ...]`` with
    ``W`` shaped ``(out, in)`` so the same arrays map one-to-one onto the
    quantized export.
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            self.params.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            self.params.append(rng.uniform(-bound, bound, size=n_out))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params[2 * i], self.params[2 * i + 1]

    def forward(self, x: np.ndarray):
        """Returns ``(out, cache)``; ``cache`` feeds :meth:`backward`."""
        h = np.asarray(x, dtype=np.float64)
        cache = []
        for i in range(self.n_layers):
            w, b = self.layer(i)
            z = h @ w.T + b
            if i < self.n_layers - 1:
                mask = z > 0
                cache.append((h, w, mask))
                h = np.where(mask, z, 0.0)
            else:
                cache.append((h, w, None))
                h = z
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dout: np.ndarray):
        """Gradient of a scalar loss w.r.t. params and the network input, given
        ``dout = dL/d(out)``."""
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        d = np.asarray(dout, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            h, w, mask = cache[i]
            if mask is not None:
                d = np.where(mask, d, 0.0)
            grads[2 * i] = d.T @ h
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ w
        return grads, d

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.sizes = self.sizes
        other.params = [p.copy() for p in self.params]
        return other

    def load(self, params) -> None:
        for dst, src in zip(self.params, params):
            dst[...] = src

    def n_params(self) -> int:
        return sum(p.size for p in self.params)


def polyak_update(target: MLP, online: MLP, tau: float) -> None:
    """``target <- (1 - tau) * target + tau * online``, in place."""
    if tau == 1.0:
        target.load(online.params)
        return
    for t, o in zip(target.params, online.params):
        t *= 1.0 - tau
        t += tau * o

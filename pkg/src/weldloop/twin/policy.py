"""Training-side mirror of the integer policy.

With fake quantization on, the forward pass runs the exact lattice arithmetic
of :func:`weldloop.qnet.forward_int` (in float64, where every intermediate is an
exactly representable integer) and the backward pass treats every quantizer,
including the requantization shift, as identity (straight-through).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from weldloop import qnet
from weldloop.twin.mlp import MLP

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


def normalize_obs(volts) -> np.ndarray:
    """Float (unquantized) network input: volts [0, 10] -> [-1, 1]."""
    return np.asarray(volts, dtype=np.float64) / 5.0 - 1.0


def softplus(x):
    return np.logaddexp(0.0, x)


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    return 2.0 * (LOG_2 - u - softplus(-2.0 * u))


def squashed_gaussian_logp(u, mean, log_std):
    """Log density of ``a = tanh(u)`` where ``u ~ N(mean, exp(log_std)^2)``."""
    z = (u - mean) * np.exp(-log_std)
    return -0.5 * z * z - log_std - 0.5 * LOG_2PI - log1m_tanh_sq(u)


@dataclass(frozen=True)
class QuantPlan:
    """Integer parameters plus the real-valued scales the twin needs to map
    lattice values back to real units."""

    policy: qnet.QuantizedPolicy
    weight_scales: tuple[float, ...]
    act_scales: tuple[float, ...]  # real value of one LSB of each layer's input


def build_plan(net: MLP, version: int = 0) -> QuantPlan:
    in_scale = 1.0 / 127.0
    in_max = np.full(net.sizes[0], 127, dtype=np.int64)
    weights, biases, shifts, w_scales, a_scales = [], [], [], [], []
    for i in range(net.n_layers):
        w, b = net.layer(i)
        wq, s_w = qnet.quantize_tensor(w)
        s_acc = s_w * in_scale
        if not np.all(np.isfinite(b)):
            raise ValueError("non-finite weight")
        headroom = qnet.INT32_MAX - int((np.abs(wq.astype(np.int64)) @ in_max).max(initial=0))
        bq = np.clip(qnet.round_half_away(b / s_acc), -headroom, headroom).astype(np.int32)
        weights.append(wq)
        biases.append(bq)
        w_scales.append(s_w)
        a_scales.append(in_scale)
        if i < net.n_layers - 1:
            bounds = qnet.relu_upper_bounds(wq, bq, in_max)
            shift = qnet.shift_for(int(bounds.max(initial=0)), qnet.ACT_BITS[i + 1])
            shifts.append(shift)
            in_max = bounds >> shift
            in_scale = s_acc * 2.0**shift
        else:
            output_scale = float(np.float32(s_acc))
            if output_scale <= 0.0:
                output_scale = float(np.finfo(np.float32).tiny)
    qp = qnet.QuantizedPolicy(tuple(weights), tuple(biases), tuple(shifts), output_scale, version, net.sizes)
    return QuantPlan(qp, tuple(w_scales), tuple(a_scales))


def lattice_forward(policy: qnet.QuantizedPolicy, obs_q: np.ndarray):
    """Integer semantics of the device evaluated in float64.

    Independent of ``qnet.forward_int``: floor division by a power of two stands
    in for the arithmetic shift.  Returns the output accumulators and the
    per-layer (integer-valued) inputs and ReLU masks.
    """
    a = np.asarray(obs_q, dtype=np.float64)
    inputs, masks = [], []
    last = len(policy.weights) - 1
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        inputs.append(a)
        acc = a @ w.astype(np.float64).T + b.astype(np.float64)
        if i < last:
            mask = acc > 0
            masks.append(mask)
            a = np.floor(np.where(mask, acc, 0.0) / 2.0 ** policy.requant_shift[i])
    return acc, inputs, masks


class TwinPolicy:
    """Float master weights for the ``[2, 32, 64, 2]`` policy plus its
    quantized export."""

    def __init__(self, rng: np.random.Generator | None = None, hidden=(32, 64), fake_quant: bool = True):
        self.net = MLP((2, *hidden, 2), rng)
        self.fake_quant = fake_quant

    @property
    def params(self):
        return self.net.params

    def plan(self, version: int = 0) -> QuantPlan:
        return build_plan(self.net, version)

    def export(self, version: int = 0) -> qnet.QuantizedPolicy:
        return self.plan(version).policy

    def export_weights(self, version: int = 0) -> bytes:
        return qnet.to_blob(self.export(version))

    @classmethod
    def from_quantized(cls, policy: qnet.QuantizedPolicy, fake_quant: bool = True) -> "TwinPolicy":
        """Master weights that sit exactly on the lattice of ``policy``.

        Hidden scales are free (the integer path does not see them) so they
        are fixed at ``1/127`` per weight tensor, and the last weight scale is
        solved from ``output_scale``.  Exact only for tensors whose peak
        magnitude is 127, which every export satisfies.
        """
        twin = cls.__new__(cls)
        twin.fake_quant = fake_quant
        twin.net = MLP.__new__(MLP)
        twin.net.sizes = policy.layer_dims
        twin.net.params = []
        in_scale = 1.0 / 127.0
        n = len(policy.weights)
        for i, (wq, bq) in enumerate(zip(policy.weights, policy.biases)):
            peak = int(np.abs(wq.astype(np.int64)).max(initial=0))
            if i < n - 1:
                s_w = 1.0 / 127.0
            else:
                s_w = policy.output_scale / in_scale
            if peak == 0:
                s_w = 1.0
            s_acc = s_w * in_scale
            twin.net.params.append(wq.astype(np.float64) * s_w)
            twin.net.params.append(bq.astype(np.float64) * s_acc)
            if i < n - 1:
                in_scale = s_acc * 2.0 ** policy.requant_shift[i]
        return twin

    # -- forward passes ------------------------------------------------------

    def forward(self, obs_volts):
        """Batched forward; returns ``(mean, log_std_raw, cache)``."""
        obs = np.atleast_2d(np.asarray(obs_volts, dtype=np.float64))
        if not self.fake_quant:
            out, cache = self.net.forward(normalize_obs(obs))
            return out[:, 0], out[:, 1], cache
        plan = self.plan()
        qp = plan.policy
        acc, inputs, masks = lattice_forward(qp, qnet.quantize_obs(obs))
        cache = []
        for i in range(len(qp.weights)):
            w_eff = qp.weights[i].astype(np.float64) * plan.weight_scales[i]
            mask = masks[i] if i < len(masks) else None
            cache.append((inputs[i] * plan.act_scales[i], w_eff, mask))
        out = acc * qp.output_scale
        return out[:, 0], out[:, 1], cache

    def backward(self, cache, dmean, dlog_std_raw):
        dout = np.stack([np.asarray(dmean, float), np.asarray(dlog_std_raw, float)], axis=1)
        grads, _ = self.net.backward(cache, dout)
        return grads

    def head(self, obs_volts) -> qnet.PolicyHead:
        """Single-observation policy head (fake-quant aware)."""
        mean, log_std, _ = self.forward(np.asarray(obs_volts, dtype=np.float64)[None, :])
        return qnet.PolicyHead.from_raw(mean[0], log_std[0])

    def predict_action(self, obs_volts, epsilon: float) -> qnet.Action:
        """What the device will do for this observation and noise draw."""
        return qnet.sample_action(self.head(obs_volts), epsilon)


def fake_quant_forward(policy: TwinPolicy, obs) -> qnet.PolicyHead:
    return policy.head(obs)


def export_weights(policy: TwinPolicy, version: int = 0) -> bytes:
    return policy.export_weights(version)

"""Integer MLP inference engine mirroring the on-device policy.

Weights are per-tensor symmetric int8, biases live at accumulator precision
(int32), hidden activations are requantized by an arithmetic right shift so
that they fit a layer-specific bitwidth (12 bits after layer 1, 16 bits after
layer 2).  The final accumulators are converted to floats with a single
``output_scale`` and fed to the squashed-Gaussian action sampler.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

LAYER_DIMS = (2, 32, 64, 2)
ACT_BITS = (8, 12, 16)  # input, after layer 1, after layer 2
INT32_MAX = 2**31 - 1

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

POWER_MIN = 25.0
POWER_MAX = 100.0
VOLTS_MAX = 5.0
SENSOR_MAX = 10.0


def round_half_away(x):
    """Round to nearest integer, ties away from zero (works on scalars and arrays)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(w) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8 quantization.

    Returns the int8 tensor and its scale (``max|w| / 127``).  An all-zero tensor
    gets scale 1.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite weight")
    max_abs = float(np.max(np.abs(w))) if w.size else 0.0
    if max_abs == 0.0:
        return np.zeros(w.shape, dtype=np.int8), 1.0
    scale = max_abs / 127.0
    q = np.clip(round_half_away(w / scale), -127, 127)
    return q.astype(np.int8), scale


def quantize_obs(volts) -> np.ndarray:
    """Map sensor voltages in [0, 10] V affinely onto int8 [-127, 127]."""
    v = np.asarray(volts, dtype=np.float64)
    q = round_half_away(v * (254.0 / SENSOR_MAX) - 127.0)
    return np.clip(q, -127, 127).astype(np.int8)


def act_max(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def relu_upper_bounds(weights: np.ndarray, biases: np.ndarray, in_max: np.ndarray) -> np.ndarray:
    """Worst-case post-ReLU accumulator per output unit.

    Inputs are assumed to range over [-in_max, in_max] (int8 input layer) or
    [0, in_max] (post-ReLU hidden layers); using the symmetric box is a safe
    over-approximation for both.
    """
    w = weights.astype(np.int64)
    return np.maximum(np.abs(w) @ in_max.astype(np.int64) + biases.astype(np.int64), 0)


def abs_acc_bounds(weights: np.ndarray, biases: np.ndarray, in_max: np.ndarray) -> np.ndarray:
    w = weights.astype(np.int64)
    return np.abs(w) @ in_max.astype(np.int64) + np.abs(biases.astype(np.int64))


def shift_for(bound: int, bits: int) -> int:
    """Smallest right shift so that ``bound >> shift`` fits a signed ``bits``-wide value."""
    limit = act_max(bits)
    shift = 0
    while (int(bound) >> shift) > limit:
        shift += 1
    return shift


@dataclass(frozen=True, eq=False)
class QuantizedPolicy:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    requant_shift: tuple[int, ...]
    output_scale: float
    version: int = 0
    layer_dims: tuple[int, ...] = field(default=LAYER_DIMS)

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.int8) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.int32) for b in self.biases))
        object.__setattr__(self, "requant_shift", tuple(int(s) for s in self.requant_shift))
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        for arr in self.weights + self.biases:
            arr.setflags(write=False)
        self._validate()

    def _validate(self):
        dims = self.layer_dims
        n = len(dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ValueError("layer count does not match layer_dims")
        if len(self.requant_shift) != n - 1:
            raise ValueError(f"expected {n - 1} requant shifts, got {len(self.requant_shift)}")
        if not (self.output_scale > 0 and math.isfinite(self.output_scale)):
            raise ValueError("output_scale must be positive and finite")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} has shape {w.shape}/{b.shape}, expected {(dims[i + 1], dims[i])}")
            if np.any(w == -128):
                raise ValueError("int8 weights must lie in [-127, 127]")
        if any(s < 0 for s in self.requant_shift):
            raise ValueError("requant shifts must be non-negative")

        in_max = np.full(dims[0], act_max(ACT_BITS[0]), dtype=np.int64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if int(abs_acc_bounds(w, b, in_max).max(initial=0)) > INT32_MAX:
                raise ValueError(f"layer {i} accumulator can overflow int32")
            if i < n - 1:
                hidden = relu_upper_bounds(w, b, in_max) >> self.requant_shift[i]
                limit = act_max(ACT_BITS[i + 1]) if i + 1 < len(ACT_BITS) else INT32_MAX
                if int(hidden.max(initial=0)) > limit:
                    raise ValueError(f"requant shift of layer {i} too small for {ACT_BITS[i + 1]}-bit activations")
                in_max = hidden

    def with_version(self, version: int) -> "QuantizedPolicy":
        return QuantizedPolicy(self.weights, self.biases, self.requant_shift, self.output_scale, version, self.layer_dims)

    def __eq__(self, other):
        if not isinstance(other, QuantizedPolicy):
            return NotImplemented
        return to_blob(self) == to_blob(other)

    def __hash__(self):
        return hash(to_blob(self))


@dataclass(frozen=True)
class PolicyHead:
    mean: float
    log_std: float

    @classmethod
    def from_raw(cls, mean: float, log_std_raw: float) -> "PolicyHead":
        return cls(float(mean), float(min(max(log_std_raw, LOG_STD_MIN), LOG_STD_MAX)))

    @property
    def std(self) -> float:
        return math.exp(self.log_std)


@dataclass(frozen=True)
class Action:
    squashed: float
    power_watts: float
    control_volts: float

    @classmethod
    def from_squashed(cls, squashed: float) -> "Action":
        power = squashed_to_power(squashed)
        return cls(float(squashed), power, power_to_volts(power))

    @classmethod
    def from_power(cls, power_watts: float) -> "Action":
        return cls(power_to_squashed(power_watts), float(power_watts), power_to_volts(power_watts))


def squashed_to_power(squashed: float) -> float:
    return 62.5 + 37.5 * squashed


def power_to_squashed(power: float) -> float:
    return (power - 62.5) / 37.5


def power_to_volts(power: float) -> float:
    return VOLTS_MAX * (power - POWER_MIN) / (POWER_MAX - POWER_MIN)


def volts_to_power(volts: float) -> float:
    return POWER_MIN + volts * (POWER_MAX - POWER_MIN) / VOLTS_MAX


# Piecewise cubic Hermite tanh on [0, 4] with knots every 0.5; the last knot is
# pinned to (1, slope 0) so the curve joins the saturation region continuously.
TANH_KNOT_STEP = 0.5
TANH_SATURATION = 4.0


def _tanh_coeffs() -> np.ndarray:
    knots = np.arange(0.0, TANH_SATURATION + TANH_KNOT_STEP / 2, TANH_KNOT_STEP)
    y = np.tanh(knots)
    dy = 1.0 - y**2
    y[-1], dy[-1] = 1.0, 0.0
    h = TANH_KNOT_STEP
    coeffs = []
    for i in range(len(knots) - 1):
        y0, y1, d0, d1 = y[i], y[i + 1], dy[i] * h, dy[i + 1] * h
        # p(s) = c0 + c1 s + c2 s^2 + c3 s^3, s in [0, 1]
        coeffs.append((y0, d0, 3 * (y1 - y0) - 2 * d0 - d1, 2 * (y0 - y1) + d0 + d1))
    return np.array(coeffs)


TANH_COEFFS = _tanh_coeffs()


def tanh_poly(x):
    """Odd, monotone piecewise-cubic tanh; exactly +-1 for ``|x| >= 4``."""
    arr = np.asarray(x, dtype=np.float64)
    ax = np.abs(arr)
    u = np.nan_to_num(np.minimum(ax, TANH_SATURATION)) / TANH_KNOT_STEP  # finite even for inf
    seg = np.minimum(u.astype(np.int64), len(TANH_COEFFS) - 1)
    s = u - seg
    c = TANH_COEFFS[seg]
    y = c[..., 0] + s * (c[..., 1] + s * (c[..., 2] + s * c[..., 3]))
    y = np.where(ax >= TANH_SATURATION, 1.0, np.minimum(y, 1.0))
    y = np.where(np.isnan(arr), np.nan, np.copysign(y, arr))
    if np.ndim(x) == 0:
        return float(y)
    return y


def op_count(layer_dims=LAYER_DIMS) -> int:
    """Integer operations per inference: MACs and bias adds for every layer,
    plus ReLU and shift for each hidden unit."""
    ops = 0
    for i in range(len(layer_dims) - 1):
        n_in, n_out = layer_dims[i], layer_dims[i + 1]
        ops += n_out * n_in + n_out
        if i < len(layer_dims) - 2:
            ops += 2 * n_out
    return ops


def forward_int(policy: QuantizedPolicy, obs_q) -> tuple[np.ndarray, int]:
    x = np.asarray(obs_q, dtype=np.int64)
    if x.shape != (policy.layer_dims[0],):
        raise ValueError(f"expected {policy.layer_dims[0]} inputs, got shape {x.shape}")
    if np.any(np.abs(x) > 127):
        raise ValueError("int8 observation out of [-127, 127]")
    last = len(policy.weights) - 1
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        acc = w.astype(np.int64) @ x + b.astype(np.int64)
        if i < last:
            x = np.maximum(acc, 0) >> policy.requant_shift[i]
    return acc.astype(np.int32), op_count(policy.layer_dims)


def head_from_acc(acc, output_scale: float) -> PolicyHead:
    return PolicyHead.from_raw(float(acc[0]) * output_scale, float(acc[1]) * output_scale)


def sample_action(head: PolicyHead, epsilon: float) -> Action:
    if not math.isfinite(epsilon):
        raise ValueError("epsilon must be finite")
    return Action.from_squashed(tanh_poly(head.mean + head.std * epsilon))


def infer(policy: QuantizedPolicy, obs_q, epsilon: float) -> Action:
    acc, _ = forward_int(policy, obs_q)
    return sample_action(head_from_acc(acc, policy.output_scale), epsilon)


def zero_policy(version: int = 0) -> QuantizedPolicy:
    dims = LAYER_DIMS
    return QuantizedPolicy(
        weights=tuple(np.zeros((dims[i + 1], dims[i]), np.int8) for i in range(len(dims) - 1)),
        biases=tuple(np.zeros(dims[i + 1], np.int32) for i in range(len(dims) - 1)),
        requant_shift=(0,) * (len(dims) - 2),
        output_scale=1.0,
        version=version,
    )


# Weight blob: per layer out:u16 in:u16 W(int8 row-major) b(int32) shift:u8,
# then output_scale:f32 and version:u32, all little-endian.
def to_blob(policy: QuantizedPolicy) -> bytes:
    out = bytearray()
    n = len(policy.weights)
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        out += struct.pack("<HH", w.shape[0], w.shape[1])
        out += w.astype("<i1").tobytes()
        out += b.astype("<i4").tobytes()
        out += struct.pack("<B", policy.requant_shift[i] if i < n - 1 else 0)
    out += struct.pack("<fI", policy.output_scale, policy.version)
    return bytes(out)


def from_blob(blob: bytes) -> QuantizedPolicy:
    view = memoryview(blob)
    pos = 0
    weights, biases, shifts = [], [], []
    dims: list[int] = []
    try:
        while len(blob) - pos > 8:
            n_out, n_in = struct.unpack_from("<HH", view, pos)
            pos += 4
            if dims and dims[-1] != n_in:
                raise ValueError("layer input size does not match previous output size")
            if not dims:
                dims.append(n_in)
            dims.append(n_out)
            w = np.frombuffer(view, dtype="<i1", count=n_out * n_in, offset=pos).reshape(n_out, n_in)
            pos += n_out * n_in
            b = np.frombuffer(view, dtype="<i4", count=n_out, offset=pos)
            pos += 4 * n_out
            (shift,) = struct.unpack_from("<B", view, pos)
            pos += 1
            weights.append(w.astype(np.int8))
            biases.append(b.astype(np.int32))
            shifts.append(shift)
        if len(blob) - pos != 8:
            raise ValueError("truncated weight blob")
        scale, version = struct.unpack_from("<fI", view, pos)
    except struct.error as exc:
        raise ValueError(f"malformed weight blob: {exc}") from exc
    return QuantizedPolicy(tuple(weights), tuple(biases), tuple(shifts[:-1]), float(scale), version, tuple(dims))

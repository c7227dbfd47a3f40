"""Surrogate laser-weld process.

A scalar melt proxy ``m`` relaxes toward a power-driven equilibrium; once it
crosses the keyhole threshold the coaxial reflection collapses.  Rougher
surfaces absorb more (faster melt) and scatter more (lower reflection), and
the scattering fades as the surface melts.

Noise is drawn from a counter-based generator keyed by
``(seed, episode, step, channel)`` so any step can be recomputed in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from weldloop import qnet

N_STEPS = 80
STEP_MM = 0.5  # 50 mm/s for 10 ms
LENGTH_MM = 40.0

CH_OR, CH_OE, CH_PROBE_OR, CH_PROBE_OE = range(4)


@dataclass(frozen=True)
class SimParams:
    lam: float = 0.7
    c: float = 0.0035
    a0: float = 0.8
    kappa: float = 0.25
    sa_ref: float = 1.47
    rho0: float = 0.3
    w: float = 0.5
    m_kh: float = 1.0
    m_max: float = 2.0
    kh_exit: float = 0.8  # fraction of m_kh below which keyhole closes
    or_peak: float = 8.0
    or_kh_factor: float = 0.15
    b0: float = 1.0
    e0: float = 5.0
    e1: float = 2.0
    sigma_oe: float = 0.1
    noise_brushed: float = 0.4
    noise_sandblasted: float = 0.15
    noise: bool = True

    def noise_sd(self, kind: str) -> float:
        return self.noise_brushed if kind == "brushed" else self.noise_sandblasted


@dataclass(frozen=True)
class Segment:
    length_mm: float
    sa_um: float
    kind: str = "brushed"
    noise_sd_volts: float | None = None  # None -> SimParams default for kind


@dataclass(frozen=True)
class SurfaceProfile:
    name: str
    segments: tuple[Segment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("profile needs at least one segment")
        total = sum(s.length_mm for s in self.segments)
        if not math.isclose(total, LENGTH_MM):
            raise ValueError(f"profile length {total} mm, expected {LENGTH_MM} mm")
        for s in self.segments:
            if s.kind not in ("brushed", "sandblasted"):
                raise ValueError(f"unknown segment kind {s.kind!r}")

    def segment_at(self, x_mm: float) -> Segment:
        edge = 0.0
        for seg in self.segments:
            edge += seg.length_mm
            if x_mm < edge:
                return seg
        return self.segments[-1]


PRESETS = {
    "brushed": SurfaceProfile("brushed", (Segment(40.0, 1.47, "brushed"),)),
    "sandblasted": SurfaceProfile("sandblasted", (Segment(40.0, 1.20, "sandblasted"),)),
    "mixed": SurfaceProfile("mixed", (
        Segment(10.0, 1.47, "brushed"),
        Segment(20.0, 1.23, "sandblasted"),
        Segment(10.0, 1.47, "brushed"),
    )),
}


def get_profile(name: str) -> SurfaceProfile:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"invalid preset name {name!r}; choose from {sorted(PRESETS)}") from None


def load_profile(path) -> SurfaceProfile:
    """Read a profile from ``key=value`` lines.

    ``name=...`` sets the name; every ``segment=length_mm, sa_um, kind[, noise_sd]``
    line appends a segment.  ``#`` starts a comment.
    """
    name = Path(path).stem
    segments = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = key.strip(), value.strip()
        if key == "name":
            name = value
        elif key == "segment":
            parts = [p.strip() for p in value.split(",")]
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: segment needs length, sa, kind[, noise_sd]")
            noise = float(parts[3]) if len(parts) == 4 else None
            segments.append(Segment(float(parts[0]), float(parts[1]), parts[2], noise))
        else:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return SurfaceProfile(name, tuple(segments))


@dataclass(frozen=True)
class SensorReading:
    or_volts: float
    oe_volts: float

    def as_array(self) -> np.ndarray:
        return np.array([self.or_volts, self.oe_volts])


@dataclass(frozen=True)
class WeldState:
    t: int = 0
    m: float = 0.0
    keyhole: bool = False
    seed: int = 0
    episode: int = 0

    @property
    def x_mm(self) -> float:
        return STEP_MM * self.t


def gaussian(seed: int, episode: int, step: int, channel: int) -> float:
    key = int(seed) & (2**64 - 1)
    counter = [int(episode) & (2**64 - 1), int(step) & (2**64 - 1), int(channel), 0]
    return float(np.random.Generator(np.random.Philox(key=key, counter=counter)).standard_normal())


def absorptivity(sa: float, p: SimParams) -> float:
    return p.a0 * (1.0 + p.kappa * sa / p.sa_ref)


def scattering(sa: float, m: float, p: SimParams) -> float:
    return p.rho0 * (sa / p.sa_ref) * (1.0 - p.w * min(m, 1.0))


def melt_update(m: float, power: float, sa: float, p: SimParams) -> float:
    return min(max(p.lam * m + p.c * absorptivity(sa, p) * power, 0.0), p.m_max)


def keyhole_update(keyhole: bool, m: float, p: SimParams) -> bool:
    if m >= p.m_kh:
        return True
    if m <= p.kh_exit * p.m_kh:
        return False
    return keyhole


def _clamp(v: float) -> float:
    return min(max(v, 0.0), qnet.SENSOR_MAX)


def sensor_means(m: float, keyhole: bool, power: float, sa: float, p: SimParams) -> tuple[float, float]:
    """Noise-free OR and OE (before clamping)."""
    rho = scattering(sa, m, p)
    melt_term = p.or_kh_factor if keyhole else m / p.m_kh
    or_v = p.b0 * (power / 100.0) * (1.0 - rho) + p.or_peak * melt_term * (1.0 - rho)
    oe_v = p.e0 * min(m, 1.0) + p.e1 * float(keyhole)
    return or_v, oe_v


def _noisy_reading(state: WeldState, seg: Segment, m, keyhole, power, p: SimParams,
                   ch_or: int, ch_oe: int, step: int) -> SensorReading:
    or_v, oe_v = sensor_means(m, keyhole, power, seg.sa_um, p)
    if p.noise:
        sd = seg.noise_sd_volts if seg.noise_sd_volts is not None else p.noise_sd(seg.kind)
        or_v += sd * gaussian(state.seed, state.episode, step, ch_or)
        oe_v += p.sigma_oe * gaussian(state.seed, state.episode, step, ch_oe)
    return SensorReading(_clamp(or_v), _clamp(oe_v))


def check_power(power: float) -> None:
    if not (qnet.POWER_MIN <= power <= qnet.POWER_MAX):
        raise ValueError(f"power {power} W outside [{qnet.POWER_MIN}, {qnet.POWER_MAX}]")


def step(state: WeldState, profile: SurfaceProfile, power_watts: float,
         params: SimParams = SimParams()) -> tuple[WeldState, SensorReading]:
    """Advance one 10 ms window at ``power_watts``."""
    check_power(power_watts)
    if state.t >= N_STEPS:
        raise ValueError("episode over")
    seg = profile.segment_at(state.x_mm)
    m = melt_update(state.m, power_watts, seg.sa_um, params)
    keyhole = keyhole_update(state.keyhole, m, params)
    reading = _noisy_reading(state, seg, m, keyhole, power_watts, params, CH_OR, CH_OE, state.t)
    return replace(state, t=state.t + 1, m=m, keyhole=keyhole), reading


def probe(state: WeldState, profile: SurfaceProfile, power_watts: float, index: int,
          params: SimParams = SimParams()) -> SensorReading:
    """Laser-on detection reading at the start position; does not advance the state."""
    check_power(power_watts)
    seg = profile.segment_at(state.x_mm)
    m = melt_update(state.m, power_watts, seg.sa_um, params)
    keyhole = keyhole_update(state.keyhole, m, params)
    return _noisy_reading(state, seg, m, keyhole, power_watts, params, CH_PROBE_OR, CH_PROBE_OE, index)


def reward(reading: SensorReading) -> float:
    return reading.or_volts / qnet.SENSOR_MAX


class WeldEnv:
    """Stateful wrapper used by the device runtime."""

    def __init__(self, profile: SurfaceProfile, seed: int = 0, episode: int = 0,
                 params: SimParams = SimParams()):
        self.profile = profile
        self.params = params
        self.state = WeldState(seed=seed, episode=episode)
        self.n_probes = 0

    def probe(self, power_watts: float = qnet.POWER_MIN) -> SensorReading:
        reading = probe(self.state, self.profile, power_watts, self.n_probes, self.params)
        self.n_probes += 1
        return reading

    def step(self, power_watts: float) -> SensorReading:
        self.state, reading = step(self.state, self.profile, power_watts, self.params)
        return reading

    @property
    def done(self) -> bool:
        return self.state.t >= N_STEPS


@dataclass
class EpisodeRecord:
    transitions: list = field(default_factory=list)
    readings: list = field(default_factory=list)  # N_STEPS + 1 observations
    powers: list = field(default_factory=list)
    keyhole: list = field(default_factory=list)

    @property
    def episode_return(self) -> float:
        return float(sum(t.reward for t in self.transitions))


def run_episode(policy_fn: Callable[[np.ndarray], float], profile: SurfaceProfile, seed: int,
                episode: int = 0, params: SimParams = SimParams()) -> EpisodeRecord:
    """Roll out 80 steps; ``policy_fn`` maps an observation (OR, OE volts) to watts.

    The first observation is the laser-on probe reading at minimum power.
    """
    from weldloop.twin.replay import Transition

    env = WeldEnv(profile, seed, episode, params)
    obs = env.probe()
    rec = EpisodeRecord(readings=[obs])
    while not env.done:
        power = float(policy_fn(obs.as_array()))
        nxt = env.step(power)
        rec.transitions.append(Transition(
            (obs.or_volts, obs.oe_volts), qnet.power_to_squashed(power), reward(nxt),
            (nxt.or_volts, nxt.oe_volts), env.done))
        rec.readings.append(nxt)
        rec.powers.append(power)
        rec.keyhole.append(env.state.keyhole)
        obs = nxt
    return rec


BASELINE_POWERS = tuple(float(p) for p in range(25, 101, 5))
BASELINE_EPISODE_OFFSET = 1_000_000  # keeps baseline noise streams apart from training episodes


def constant_power_returns(profile: SurfaceProfile, powers=BASELINE_POWERS, episodes_per_power: int = 20,
                           seed: int = 0, params: SimParams = SimParams()) -> list[tuple[float, float]]:
    """Mean episode return of each constant power; the same noise episodes are
    reused for every power."""
    table = []
    for power in powers:
        returns = [
            run_episode(lambda _obs, p=power: p, profile, seed, BASELINE_EPISODE_OFFSET + k, params).episode_return
            for k in range(episodes_per_power)
        ]
        table.append((float(power), float(np.mean(returns))))
    return table


def best_of(table) -> tuple[float, float]:
    if not table:
        raise ValueError("empty grid")
    best_power, best_mean = None, -math.inf
    for power, mean in sorted(table):
        if mean > best_mean:  # strict: ties keep the lower power
            best_power, best_mean = power, mean
    return best_power, best_mean


def grid_search_baseline(profile: SurfaceProfile, powers=BASELINE_POWERS, episodes_per_power: int = 20,
                         seed: int = 0, params: SimParams = SimParams()) -> tuple[float, float]:
    if len(powers) == 0:
        raise ValueError("empty grid")
    return best_of(constant_power_returns(profile, powers, episodes_per_power, seed, params))

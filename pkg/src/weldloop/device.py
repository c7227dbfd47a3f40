"""Device runtime: the in-process stand-in for the FPGA controller.

Holds the current :class:`~weldloop.qnet.QuantizedPolicy`, waits for the
laser-on trigger, runs the 80-step act/observe loop against the weld
surrogate and packs the FIFO of (observation, action) pairs into an
EXPERIENCE payload.
"""

from __future__ import annotations

import argparse
import logging
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from weldloop import link, qnet, weldsim

log = logging.getLogger(__name__)

TRIGGER_VOLTS = 0.1
MAX_PROBES = 100
STEP_SECONDS = 0.010


class TriggerTimeout(RuntimeError):
    pass


class EpsilonUnderrun(link.ProtocolError):
    pass


def trigger_wait(env, threshold: float = TRIGGER_VOLTS, max_probes: int = MAX_PROBES) -> weldsim.SensorReading:
    """Probe at minimum power until OR reaches ``threshold``; returns the first observation."""
    for _ in range(max_probes):
        reading = env.probe(qnet.POWER_MIN)
        if reading.or_volts >= threshold:
            return reading
    raise TriggerTimeout(f"no trigger after {max_probes} probes")


def exploration_policy(step: int, rng: np.random.Generator) -> qnet.Action:
    """Uniform random power in [25, 100] W; ``step`` is unused (draws are i.i.d.)."""
    return qnet.Action.from_power(float(rng.uniform(qnet.POWER_MIN, qnet.POWER_MAX)))


def run_device_episode(policy: qnet.QuantizedPolicy, epsilons, env, mode: int = link.MODE_TRAIN,
                       episode_id: int = 0, rng: np.random.Generator | None = None,
                       realtime: bool = False, on_step=None) -> link.ExperienceMsg:
    """One 80-step episode.

    Train mode draws ``epsilons`` in order; test mode uses 0 at every step;
    random mode ignores the policy and samples powers uniformly (the epsilons
    are still drained so the stream stays aligned).
    """
    fifo: deque = deque(maxlen=weldsim.N_STEPS)
    eps = deque(epsilons)
    if mode == link.MODE_TRAIN and len(eps) != weldsim.N_STEPS:
        raise EpsilonUnderrun(f"train episode needs {weldsim.N_STEPS} epsilons, got {len(eps)}")
    obs = trigger_wait(env)
    tick = time.monotonic()
    for t in range(weldsim.N_STEPS):
        if not eps:
            raise EpsilonUnderrun(f"epsilon stream exhausted at step {t}")
        e = eps.popleft()
        if mode == link.MODE_RANDOM:
            action = exploration_policy(t, rng)
        else:
            action = qnet.infer(policy, qnet.quantize_obs(obs.as_array()), 0.0 if mode == link.MODE_TEST else e)
        nxt = env.step(action.power_watts)
        fifo.append(link.StepRecord(link.f32(obs.or_volts), link.f32(obs.oe_volts),
                                    link.f32(action.squashed), link.f32(action.power_watts)))
        if on_step is not None:
            on_step(t, obs, action, env)
        obs = nxt
        if realtime:
            tick += STEP_SECONDS
            time.sleep(max(0.0, tick - time.monotonic()))
    flags = (link.FLAG_TEST if mode == link.MODE_TEST else 0) | (link.FLAG_RANDOM if mode == link.MODE_RANDOM else 0)
    return link.ExperienceMsg(episode_id, tuple(fifo), (link.f32(obs.or_volts), link.f32(obs.oe_volts)), flags)


@dataclass
class StepLog:
    episode: int
    step: int
    or_volts: float
    oe_volts: float
    power: float
    keyhole: bool


class DeviceRuntime:
    """Policy holder plus environment factory.  Weight swaps only happen
    between episodes (the session is single-threaded)."""

    def __init__(self, profile: weldsim.SurfaceProfile, seed: int = 0,
                 params: weldsim.SimParams = weldsim.SimParams(), realtime: bool = False,
                 record: bool = False):
        self.profile = profile
        self.seed = seed
        self.params = params
        self.realtime = realtime
        self.policy: qnet.QuantizedPolicy | None = None
        self.epsilons_consumed = 0
        self.episode_versions: dict[int, int] = {}
        self.record = record
        self.step_log: list[StepLog] = []

    @property
    def version(self) -> int:
        return self.policy.version if self.policy is not None else 0

    def load(self, policy: qnet.QuantizedPolicy) -> None:
        if self.policy is not None and policy.version < self.policy.version:
            raise ValueError("policy version must not decrease")
        self.policy = policy

    def make_env(self, episode: int) -> weldsim.WeldEnv:
        return weldsim.WeldEnv(self.profile, self.seed, episode, self.params)

    def run_episode(self, episode: int, epsilons, mode: int) -> link.ExperienceMsg:
        if self.policy is None:
            raise RuntimeError("no policy loaded")
        env = self.make_env(episode)
        rng = np.random.default_rng([self.seed, episode, 7])
        on_step = None
        if self.record:
            def on_step(t, obs, action, env):
                self.step_log.append(StepLog(episode, t + 1, obs.or_volts, obs.oe_volts,
                                             action.power_watts, env.state.keyhole))
        exp = run_device_episode(self.policy, epsilons, env, mode, episode, rng, self.realtime, on_step)
        self.epsilons_consumed += len(exp.steps)
        self.episode_versions[episode] = self.version
        return exp


def main(argv=None) -> int:
    from weldloop.expcli import config as cfg

    parser = argparse.ArgumentParser(prog="weldloop device", description="Run the device side of a session.")
    parser.add_argument("--server", required=True, help="host:port of the training server")
    parser.add_argument("--surface", default="sandblasted")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--realtime", action="store_true")
    parser.add_argument("--config", help="key=value config file (sim.* keys are used)")
    parser.add_argument("--timeout", type=float, default=link.DEFAULT_TIMEOUT)
    args = parser.parse_args(argv)
    conf = cfg.load_config(args.config) if args.config else cfg.ExperimentConfig()
    profile = cfg.resolve_profile(args.surface)
    runtime = DeviceRuntime(profile, args.seed, conf.sim, args.realtime)
    session = link.device_session(args.server, runtime, args.timeout)
    log.info("device finished: %d epsilons consumed, %d errors", runtime.epsilons_consumed, len(session.errors))
    return 0

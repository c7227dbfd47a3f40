"""Experiment orchestration: baseline grid search, the server/device session
and CSV artifacts."""

from __future__ import annotations

import csv
import logging
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from weldloop import device, link, qnet, weldsim
from weldloop.expcli import config as cfg
from weldloop.twin.replay import ReplayBuffer, Transition
from weldloop.twin.sac import SACLearner

log = logging.getLogger(__name__)

TRAIN_COLUMNS = ("episode", "return", "policy_version")
TEST_COLUMNS = ("episode", "return", "policy_version")
BASELINE_COLUMNS = ("power", "mean_return")
TRACE_COLUMNS = ("step", "OR", "OE", "power")
LOSS_COLUMNS = ("episode", "step", "critic1_loss", "critic2_loss", "actor_loss", "alpha", "entropy_estimate")


def episode_mode(episode: int, conf: cfg.ExperimentConfig) -> int:
    if episode <= conf.random_episodes:
        return link.MODE_RANDOM
    if conf.test_every and episode % conf.test_every == 0:
        return link.MODE_TEST
    return link.MODE_TRAIN


def experience_to_transitions(msg: link.ExperienceMsg) -> list[Transition]:
    """Rebuild (s, a, r, s', done) with ``r = OR(s') / 10`` computed here."""
    obs = [(s.obs_or, s.obs_oe) for s in msg.steps] + [tuple(msg.final_obs)]
    n = len(msg.steps)
    return [
        Transition(obs[t], msg.steps[t].action_squashed, obs[t + 1][0] / qnet.SENSOR_MAX, obs[t + 1], t == n - 1)
        for t in range(n)
    ]


@dataclass
class Trainer:
    """Server-side learner driven by :class:`weldloop.link.ServerSession`."""

    conf: cfg.ExperimentConfig
    learner: SACLearner = None
    buffer: ReplayBuffer = None
    version: int = 0
    train_rows: list = field(default_factory=list)
    test_rows: list = field(default_factory=list)
    loss_rows: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    eps_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.learner is None:
            self.learner = SACLearner(self.conf.sac, self.conf.seed)
        if self.buffer is None:
            self.buffer = ReplayBuffer(self.conf.sac.buffer_capacity)
        self._eps_rng = np.random.default_rng([self.conf.seed, 2])
        self.current: qnet.QuantizedPolicy | None = None

    def weights(self, episode: int) -> qnet.QuantizedPolicy:
        self.version += 1
        self.current = self.learner.policy.export(self.version)
        return self.current

    def epsilons(self, episode: int):
        eps = self._eps_rng.standard_normal(weldsim.N_STEPS)
        self.eps_log.append((episode, eps))
        return eps

    def mode(self, episode: int) -> int:
        return episode_mode(episode, self.conf)

    def on_experience(self, episode: int, msg: link.ExperienceMsg) -> None:
        transitions = experience_to_transitions(msg)
        ret = float(sum(t.reward for t in transitions))
        if msg.is_test:
            self.test_rows.append((episode, ret, self.version))
            self.traces[episode] = [(t + 1, s.obs_or, s.obs_oe, s.power_watts) for t, s in enumerate(msg.steps)]
            return
        self.train_rows.append((episode, ret, self.version))
        self.buffer.extend(transitions)
        if len(self.buffer) >= self.conf.sac.batch_size:
            for i, row in enumerate(self.learner.sac_update(self.buffer)):
                self.loss_rows.append((episode, i + 1, row["critic1_loss"], row["critic2_loss"],
                                       row["actor_loss"], row["alpha"], row["entropy_estimate"]))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_baseline(conf: cfg.ExperimentConfig, profile=None):
    profile = profile or cfg.resolve_profile(conf.surface)
    table = weldsim.constant_power_returns(profile, conf.baseline_powers, conf.baseline_episodes, conf.seed, conf.sim)
    return table, weldsim.best_of(table)


def compare_to_baseline(test_returns, best_mean_return: float, last: int = 10) -> float:
    """Percent improvement of the mean of the last ``last`` test returns over the baseline."""
    tail = list(test_returns)[-last:]
    if not tail:
        raise ValueError("no test returns")
    return 100.0 * (float(np.mean(tail)) - best_mean_return) / best_mean_return


@dataclass
class RunResult:
    out_dir: Path
    trainer: Trainer
    baseline_best: tuple[float, float]
    final_policy: qnet.QuantizedPolicy
    device_runtime: device.DeviceRuntime | None = None
    device_session: link.DeviceSession | None = None
    server_session: link.ServerSession | None = None

    @property
    def test_returns(self) -> list[float]:
        return [r for _, r, _ in self.trainer.test_rows]

    @property
    def improvement(self) -> float:
        return compare_to_baseline(self.test_returns, self.baseline_best[1])


def _in_process(conf, profile, trainer, episodes):
    server_ch, device_ch = link.loopback_pair(conf.timeout)
    runtime = device.DeviceRuntime(profile, conf.seed, conf.sim, conf.realtime, record=True)
    dsession = link.DeviceSession(device_ch, runtime)
    failure = []

    def device_task():
        try:
            dsession.run()
        except Exception as exc:  # surfaced after join
            failure.append(exc)

    thread = threading.Thread(target=device_task, name="device", daemon=True)
    thread.start()
    ssession = link.ServerSession(server_ch, trainer)
    try:
        ssession.run(episodes)
    finally:
        thread.join(timeout=conf.timeout)
        server_ch.close()
        device_ch.close()
    if failure:
        raise failure[0]
    return ssession, dsession, runtime


def _cross_process(conf, trainer, episodes, snapshot: Path):
    listener = link.listen("127.0.0.1", 0)
    port = listener.getsockname()[1]
    cmd = [sys.executable, "-m", "weldloop", "device", "--server", f"127.0.0.1:{port}",
           "--surface", conf.surface, "--seed", str(conf.seed), "--config", str(snapshot),
           "--timeout", str(conf.timeout)]
    if conf.realtime:
        cmd.append("--realtime")
    proc = subprocess.Popen(cmd)
    try:
        session = link.server_session(listener, trainer, episodes, conf.timeout)
        if proc.wait(timeout=conf.timeout) != 0:
            raise RuntimeError(f"device process exited with {proc.returncode}")
    finally:
        listener.close()
        if proc.poll() is None:
            proc.kill()
    return session


def run_experiment(conf: cfg.ExperimentConfig, out_dir, cross_process: bool = False, plots: bool = False) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profile = cfg.resolve_profile(conf.surface)
    snapshot = out / "config.txt"
    snapshot.write_text(cfg.dump_config(conf))

    table, best = run_baseline(conf, profile)
    write_csv(out / "baseline.csv", BASELINE_COLUMNS, table)

    trainer = Trainer(conf)
    episodes = range(1, conf.episodes + 1)
    runtime = dsession = None
    if cross_process:
        ssession = _cross_process(conf, trainer, episodes, snapshot)
    else:
        ssession, dsession, runtime = _in_process(conf, profile, trainer, episodes)

    write_csv(out / "train_returns.csv", TRAIN_COLUMNS, trainer.train_rows)
    write_csv(out / "test_returns.csv", TEST_COLUMNS, trainer.test_rows)
    write_csv(out / "losses.csv", LOSS_COLUMNS, trainer.loss_rows)
    for episode, rows in trainer.traces.items():
        write_csv(out / f"trace_ep{episode}.csv", TRACE_COLUMNS, rows)
    final = trainer.learner.policy.export(trainer.version + 1)
    (out / "policy_final.bin").write_bytes(qnet.to_blob(final))
    if plots:
        from weldloop.expcli import plots as plotting
        plotting.plot_dir(out)
    return RunResult(out, trainer, best, final, runtime, dsession, ssession)


@dataclass
class PolicyEvaluation:
    returns: list
    keyhole_fraction: float
    mean_power_by_step: np.ndarray


def evaluate_policy(policy: qnet.QuantizedPolicy, profile, seed: int, episodes,
                    params: weldsim.SimParams = weldsim.SimParams()) -> PolicyEvaluation:
    """Deterministic (test-mode) roll-outs of ``policy`` on the device runtime,
    tracking the surrogate's keyhole flag."""
    runtime = device.DeviceRuntime(profile, seed, params, record=True)
    runtime.load(policy)
    returns = []
    for e in episodes:
        exp = runtime.run_episode(e, [0.0] * weldsim.N_STEPS, link.MODE_TEST)
        returns.append(sum(t.reward for t in experience_to_transitions(exp)))
    kh = np.array([s.keyhole for s in runtime.step_log], dtype=float)
    power = np.array([s.power for s in runtime.step_log]).reshape(-1, weldsim.N_STEPS)
    return PolicyEvaluation(returns, float(kh.mean()), power.mean(axis=0))

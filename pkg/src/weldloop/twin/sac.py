"""Soft actor-critic with twin critics and a learned entropy temperature.

Only the policy is quantization-aware; the critics are plain float networks
fed with normalized (unquantized) sensor voltages and the squashed action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from weldloop import qnet
from weldloop.twin.mlp import MLP, polyak_update
from weldloop.twin.optim import Adam
from weldloop.twin.policy import TwinPolicy, normalize_obs, squashed_gaussian_logp
from weldloop.twin.replay import Batch, ReplayBuffer


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class SACConfig:
    lr: float = 3e-4
    batch_size: int = 100
    gamma: float = 0.99
    tau: float = 0.005
    gradient_steps: int = 80
    target_entropy: float = -2.0
    init_alpha: float = 1.0
    hidden: tuple[int, ...] = (32, 64)
    critic_hidden: tuple[int, ...] = (32, 64)
    buffer_capacity: int = 100_000
    fake_quant: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


def critic_input(obs, action) -> np.ndarray:
    return np.column_stack([normalize_obs(obs), np.asarray(action, dtype=np.float64)])


def critic_target(batch: Batch, next_action, next_logp, q1_target: MLP, q2_target: MLP,
                  gamma: float, alpha: float) -> np.ndarray:
    """``y = r + gamma (1 - done) (min(Q1', Q2')(s', a') - alpha log pi(a'|s'))``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = critic_input(batch.next_obs, next_action)
    q_next = np.minimum(q1_target(x)[:, 0], q2_target(x)[:, 0])
    soft = q_next - alpha * np.asarray(next_logp, dtype=np.float64)
    return batch.reward + gamma * (1.0 - batch.done) * soft


@dataclass
class PolicySample:
    mean: np.ndarray
    log_std: np.ndarray
    clip_mask: np.ndarray  # 1 where log_std is inside its clamp range
    u: np.ndarray
    action: np.ndarray
    logp: np.ndarray
    cache: list


def sample_policy(policy: TwinPolicy, obs, eps) -> PolicySample:
    mean, raw, cache = policy.forward(obs)
    log_std = np.clip(raw, qnet.LOG_STD_MIN, qnet.LOG_STD_MAX)
    clip_mask = ((raw >= qnet.LOG_STD_MIN) & (raw <= qnet.LOG_STD_MAX)).astype(np.float64)
    u = mean + np.exp(log_std) * eps
    a = np.tanh(u)
    return PolicySample(mean, log_std, clip_mask, u, a, squashed_gaussian_logp(u, mean, log_std), cache)


def actor_loss_and_grads(policy: TwinPolicy, q1: MLP, q2: MLP, obs, eps, alpha: float):
    """Actor objective ``mean(alpha * log pi(a|s) - min(Q1, Q2)(s, a))`` with
    ``a`` reparameterized through ``eps``; returns ``(loss, policy grads, sample)``."""
    s = sample_policy(policy, obs, eps)
    n = len(s.u)
    x = critic_input(obs, s.action)
    q1_out, c1 = q1.forward(x)
    q2_out, c2 = q2.forward(x)
    use1 = q1_out[:, 0] <= q2_out[:, 0]
    q_min = np.where(use1, q1_out[:, 0], q2_out[:, 0])
    loss = float(np.mean(alpha * s.logp - q_min))

    # dQ_min/da, routed through whichever critic attained the minimum
    _, dx1 = q1.backward(c1, use1[:, None].astype(np.float64))
    _, dx2 = q2.backward(c2, (~use1)[:, None].astype(np.float64))
    dq_da = dx1[:, -1] + dx2[:, -1]

    std = np.exp(s.log_std)
    eps = np.asarray(eps, dtype=np.float64)
    # d logp/du = 2 tanh(u) (Gaussian term is constant in u for fixed eps)
    g_u = (alpha * 2.0 * s.action - dq_da * (1.0 - s.action**2)) / n
    d_mean = g_u
    d_log_std = (-alpha / n + g_u * std * eps) * s.clip_mask
    grads = policy.backward(s.cache, d_mean, d_log_std)
    return loss, grads, s


def critic_loss_and_grads(q: MLP, obs, action, y):
    out, cache = q.forward(critic_input(obs, action))
    err = out[:, 0] - y
    loss = float(np.mean(err**2))
    grads, _ = q.backward(cache, (2.0 * err / len(err))[:, None])
    return loss, grads


def temperature_loss_and_grad(log_alpha: float, logp, target_entropy: float):
    """``-log_alpha * mean(logp + target_entropy)`` with logp treated as a constant."""
    m = float(np.mean(np.asarray(logp) + target_entropy))
    return -log_alpha * m, -m


class SACLearner:
    def __init__(self, config: SACConfig | None = None, seed: int = 0):
        self.config = config or SACConfig()
        c = self.config
        self.rng = np.random.default_rng(seed)
        init_rng = np.random.default_rng([seed, 1])
        self.policy = TwinPolicy(init_rng, c.hidden, c.fake_quant)
        self.q1 = MLP((3, *c.critic_hidden, 1), init_rng)
        self.q2 = MLP((3, *c.critic_hidden, 1), init_rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = np.array([math.log(c.init_alpha)])
        adam = dict(lr=c.lr, betas=(c.beta1, c.beta2), eps=c.adam_eps)
        self.policy_opt = Adam(self.policy.params, **adam)
        self.q1_opt = Adam(self.q1.params, **adam)
        self.q2_opt = Adam(self.q2.params, **adam)
        self.alpha_opt = Adam([self.log_alpha], **adam)
        self.steps = 0

    @property
    def alpha(self) -> float:
        return float(math.exp(self.log_alpha[0]))

    def update_step(self, batch: Batch) -> dict:
        c = self.config
        n = len(batch)
        alpha = self.alpha

        nxt = sample_policy(self.policy, batch.next_obs, self.rng.standard_normal(n))
        y = critic_target(batch, nxt.action, nxt.logp, self.q1_target, self.q2_target, c.gamma, alpha)
        l1, g1 = critic_loss_and_grads(self.q1, batch.obs, batch.action, y)
        l2, g2 = critic_loss_and_grads(self.q2, batch.obs, batch.action, y)
        self._check("critic", l1=l1, l2=l2)
        self.q1_opt.step(g1)
        self.q2_opt.step(g2)

        la, ga, cur = actor_loss_and_grads(self.policy, self.q1, self.q2, batch.obs, self.rng.standard_normal(n), alpha)
        lt, gt = temperature_loss_and_grad(float(self.log_alpha[0]), cur.logp, c.target_entropy)
        self._check("actor", actor_loss=la, alpha_loss=lt)
        self.policy_opt.step(ga)
        self.alpha_opt.step([np.array([gt])])

        polyak_update(self.q1_target, self.q1, c.tau)
        polyak_update(self.q2_target, self.q2, c.tau)
        self.steps += 1
        return {
            "critic1_loss": l1,
            "critic2_loss": l2,
            "actor_loss": la,
            "alpha": self.alpha,
            "entropy_estimate": float(-np.mean(cur.logp)),
        }

    def _check(self, stage: str, **losses):
        if not all(math.isfinite(v) for v in losses.values()):
            raise TrainingDiverged(f"non-finite {stage} loss at step {self.steps}",
                                   {**losses, "alpha": self.alpha, "step": self.steps})

    def sac_update(self, buffer: ReplayBuffer, n_steps: int | None = None) -> list[dict]:
        c = self.config
        if len(buffer) < c.batch_size:
            raise ValueError(f"buffer holds {len(buffer)} transitions, need {c.batch_size}")
        n_steps = c.gradient_steps if n_steps is None else n_steps
        return [self.update_step(buffer.sample(c.batch_size, self.rng)) for _ in range(n_steps)]

    def export_weights(self, version: int) -> bytes:
        return self.policy.export_weights(version)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import random_twin
from weldloop import qnet
from weldloop.twin import sac
from weldloop.twin.gradcheck import grad_check, numerical_grad
from weldloop.twin.mlp import MLP, polyak_update
from weldloop.twin.policy import (TwinPolicy, build_plan, export_weights, fake_quant_forward, lattice_forward,
                                  squashed_gaussian_logp)
from weldloop.twin.replay import Batch, ReplayBuffer, Transition


class TestFakeQuantForward:
    def test_zero_weights(self):
        twin = TwinPolicy(np.random.default_rng(0))
        for p in twin.params:
            p[...] = 0.0
        mean, log_std, _ = twin.forward(np.array([[4.0, 2.0]]))
        assert (mean[0], log_std[0]) == (0.0, 0.0)
        head = fake_quant_forward(twin, [4.0, 2.0])
        assert (head.mean, head.log_std) == (0.0, 0.0)

    def test_matches_device(self):
        twin = TwinPolicy(np.random.default_rng(42))
        obs = np.array([3.3, 1.1])
        policy = twin.export()
        acc, _ = qnet.forward_int(policy, qnet.quantize_obs(obs))
        assert fake_quant_forward(twin, obs) == qnet.head_from_acc(acc, policy.output_scale)
        for eps in (0.0, 0.5, -1.7):
            assert twin.predict_action(obs, eps) == qnet.infer(policy, qnet.quantize_obs(obs), eps)

    def test_integer_paths_agree(self, rng):
        for _ in range(300):
            policy = random_twin(rng).export()
            x = rng.integers(-127, 128, size=2)
            acc, _ = qnet.forward_int(policy, x)
            twin_acc, _, _ = lattice_forward(policy, x[None, :])
            assert np.array_equal(acc.astype(np.float64), twin_acc[0])

    def test_lattice_weights_quant_on_equals_off(self):
        # Weights are integer multiples of their scale and every activation is
        # a multiple of 2**shift, so quantization loses nothing.
        twin = TwinPolicy(np.random.default_rng(0))
        s = 0.01
        w1, b1, w2, b2, w3, b3 = twin.params
        w1[...] = 0.0
        w1[:, 0] = 127 * s
        w2[...] = 0.0
        w2[:, 0] = 127 * s
        w3[...] = np.random.default_rng(1).integers(-127, 128, size=w3.shape) * s
        w3[0, 0] = 127 * s
        for b in (b1, b2, b3):
            b[...] = 0.0
        plan = build_plan(twin.net)
        assert plan.policy.requant_shift == (3, 3)
        obs = np.array([[5.0 * (64 / 127 + 1), 5.0]])
        on = twin.forward(obs)[:2]
        twin.fake_quant = False
        off = twin.forward(obs)[:2]
        # only difference: output_scale is stored as float32
        np.testing.assert_allclose(on, off, rtol=1e-7)


class TestExport:
    def test_idempotent(self):
        blob = export_weights(TwinPolicy(np.random.default_rng(7)), version=4)
        assert qnet.to_blob(qnet.from_blob(blob)) == blob

    def test_twin_reimport(self, rng):
        for _ in range(20):
            blob = random_twin(rng).export_weights(version=2)
            again = TwinPolicy.from_quantized(qnet.from_blob(blob)).export_weights(version=2)
            assert again == blob

    def test_zero_policy(self):
        twin = TwinPolicy(np.random.default_rng(0))
        for p in twin.params:
            p[...] = 0.0
        plan = twin.plan()
        assert all(np.all(w == 0) for w in plan.policy.weights)
        assert all(np.all(b == 0) for b in plan.policy.biases)
        assert plan.weight_scales == (1.0, 1.0, 1.0)

    def test_device_matches_twin_on_blob(self, rng):
        twin = TwinPolicy(np.random.default_rng(99))
        device_policy = qnet.from_blob(twin.export_weights(version=1))
        for obs in rng.uniform(0, 10, size=(100, 2)):
            eps = float(rng.standard_normal())
            assert qnet.infer(device_policy, qnet.quantize_obs(obs), eps) == twin.predict_action(obs, eps)

    def test_non_finite_master_weight(self):
        twin = TwinPolicy(np.random.default_rng(0))
        twin.params[0][0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            twin.export()


def batch_of(n, rng, done=None):
    return Batch(rng.uniform(0, 10, (n, 2)), rng.uniform(-1, 1, n), rng.uniform(0, 1, n),
                 rng.uniform(0, 10, (n, 2)), np.zeros(n) if done is None else done)


def constant_critic(c):
    net = MLP((3, 4, 1))
    for p in net.params:
        p[...] = 0.0
    net.params[-1][...] = c
    return net


class TestCriticTarget:
    def test_no_discount(self, rng):
        b = batch_of(5, rng)
        q = MLP((3, 8, 1), rng)
        y = sac.critic_target(b, rng.uniform(-1, 1, 5), rng.normal(size=5), q, q, gamma=0.0, alpha=0.3)
        np.testing.assert_array_equal(y, b.reward)

    def test_done(self, rng):
        b = Batch(np.ones((1, 2)), np.zeros(1), np.array([0.4]), np.ones((1, 2)), np.ones(1))
        q = MLP((3, 8, 1), rng)
        assert sac.critic_target(b, [0.3], [1.0], q, q, 0.99, 0.2)[0] == 0.4

    def test_constant_critics(self):
        b = Batch(np.ones((1, 2)), np.zeros(1), np.array([0.25]), np.ones((1, 2)), np.zeros(1))
        y = sac.critic_target(b, [0.1], [-3.0], constant_critic(2.0), constant_critic(5.0), 0.99, alpha=0.0)
        assert y[0] == pytest.approx(0.25 + 0.99 * 2.0)

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            sac.critic_target(batch_of(0, rng), [], [], constant_critic(0), constant_critic(0), 0.99, 0.1)


class TestLogProb:
    @pytest.mark.parametrize("mean,log_std,a", [(0.0, 0.0, 0.3), (0.5, -1.0, 0.7), (-1.2, 0.4, -0.95), (2.0, -2.0, 0.99)])
    def test_against_quadrature(self, mean, log_std, a):
        # density of tanh(u) = d/da P(tanh(u) <= a): Gaussian mass of the
        # preimage of [a - h, a + h] by quadrature, Richardson-extrapolated in h
        std = math.exp(log_std)

        def slope(h):
            mass, _ = integrate.quad(lambda u: stats.norm.pdf(u, mean, std), math.atanh(a - h), math.atanh(a + h),
                                     epsabs=0.0, epsrel=1e-13)
            return mass / (2 * h)

        h = 1e-5
        density = (4 * slope(h / 2) - slope(h)) / 3
        logp = squashed_gaussian_logp(math.atanh(a), mean, log_std)
        assert abs(math.exp(logp) - density) / density < 1e-6


class TestGradients:
    def test_linear_mse(self, rng):
        net = MLP((1, 1), rng)
        x, y = rng.normal(size=(6, 1)), rng.normal(size=6)

        def loss_and_grads():
            out, cache = net.forward(x)
            err = out[:, 0] - y
            grads, _ = net.backward(cache, (2 * err / len(err))[:, None])
            return float(np.mean(err**2)), grads

        assert net.n_params() == 2
        assert grad_check(net.params, loss_and_grads) < 1e-4

    def test_constant_loss(self, rng):
        net = MLP((2, 3, 1), rng)
        numeric = numerical_grad(lambda: 1.5, net.params)
        assert all(np.all(g == 0) for g in numeric)

    def test_squashed_logp_head(self, rng):
        twin = TwinPolicy(rng, hidden=(4, 4), fake_quant=False)
        obs, eps = rng.uniform(0, 10, (5, 2)), rng.normal(size=5)

        def loss_and_grads():
            s = sac.sample_policy(twin, obs, eps)
            n = len(eps)
            std = np.exp(s.log_std)
            g_u = 2.0 * s.action / n
            grads = twin.backward(s.cache, g_u, (-1.0 / n + g_u * std * eps) * s.clip_mask)
            return float(np.mean(s.logp)), grads

        assert grad_check(twin.params, loss_and_grads) < 1e-4

    def test_actor_critic_temperature(self, rng):
        twin = TwinPolicy(rng, hidden=(6, 6), fake_quant=False)
        q1, q2 = MLP((3, 6, 6, 1), rng), MLP((3, 6, 6, 1), rng)
        obs, eps = rng.uniform(0, 10, (8, 2)), rng.normal(size=8)
        assert grad_check(twin.params, lambda: sac.actor_loss_and_grads(twin, q1, q2, obs, eps, 0.3)[:2]) < 1e-4
        b = batch_of(8, rng)
        y = rng.normal(size=8)
        assert grad_check(q1.params, lambda: sac.critic_loss_and_grads(q1, b.obs, b.action, y)) < 1e-4
        log_alpha = np.array([0.2])
        logp = rng.normal(size=8)

        def temp():
            loss, g = sac.temperature_loss_and_grad(float(log_alpha[0]), logp, -2.0)
            return loss, [np.array([g])]

        assert grad_check([log_alpha], temp) < 1e-4

    def test_straight_through_passes_gradient(self, rng):
        # With fake-quant on, gradients flow through quantizers as identity:
        # they equal the float-path gradient evaluated with the quantized
        # weights and activations.
        twin = TwinPolicy(rng)
        obs = rng.uniform(0, 10, (4, 2))
        mean, log_std, cache = twin.forward(obs)
        grads = twin.backward(cache, np.ones(4), np.zeros(4))
        assert all(np.all(np.isfinite(g)) for g in grads)
        assert any(np.any(g != 0) for g in grads)
        # output bias gradient is the plain sum of upstream gradients
        assert grads[-1].tolist() == [4.0, 0.0]


class TestTemperature:
    def test_stationary_at_target(self, rng):
        logp = rng.normal(size=50)
        _, g = sac.temperature_loss_and_grad(0.3, logp, target_entropy=-float(np.mean(logp)))
        assert abs(g) < 1e-12

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(-5, 5))
    @settings(max_examples=50)
    def test_step_direction(self, logp, target):
        learner = sac.SACLearner(seed=0)
        before = float(learner.log_alpha[0])
        drive = float(np.mean(np.array(logp) + target))
        if abs(drive) < 1e-9:
            return
        _, g = sac.temperature_loss_and_grad(before, logp, target)
        learner.alpha_opt.step([np.array([g])])
        after = float(learner.log_alpha[0])
        # loss -log_alpha * drive: gradient descent raises log_alpha when drive > 0
        assert (after > before) == (drive > 0)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(capacity=5)
        for i in range(12):
            buf.add(Transition((i, 0.0), 0.0, 0.0, (0.0, 0.0), False))
        assert len(buf) == 5
        assert [t.obs[0] for t in buf.contents()] == [7, 8, 9, 10, 11]

    def test_sample_without_replacement(self, rng):
        buf = ReplayBuffer(capacity=50)
        for i in range(30):
            buf.add(Transition((i, 0.0), 0.0, 0.0, (0.0, 0.0), False))
        b = buf.sample(30, rng)
        assert sorted(b.obs[:, 0].tolist()) == list(range(30))
        with pytest.raises(ValueError):
            buf.sample(31, rng)


class TestSACUpdate:
    def test_polyak_tau_one(self, rng):
        online, target = MLP((3, 4, 1), rng), MLP((3, 4, 1), rng)
        polyak_update(target, online, 1.0)
        assert all(np.array_equal(a, b) for a, b in zip(online.params, target.params))

    def test_polyak_blend(self, rng):
        online, target = MLP((2, 1), rng), MLP((2, 1), rng)
        expected = [0.9 * t + 0.1 * o for t, o in zip(target.params, online.params)]
        polyak_update(target, online, 0.1)
        for e, t in zip(expected, target.params):
            np.testing.assert_allclose(t, e)

    def test_targets_move_only_by_polyak(self):
        learner = sac.SACLearner(sac.SACConfig(batch_size=10), seed=3)
        buf = ReplayBuffer(100)
        r = np.random.default_rng(0)
        for _ in range(20):
            buf.add(Transition(tuple(r.uniform(0, 10, 2)), float(r.uniform(-1, 1)), 0.5, tuple(r.uniform(0, 10, 2)), False))
        before = [p.copy() for p in learner.q1_target.params]
        online_before = [p.copy() for p in learner.q1.params]
        learner.sac_update(buf, n_steps=1)
        tau = learner.config.tau
        for b, ob, o, t in zip(before, online_before, learner.q1.params, learner.q1_target.params):
            np.testing.assert_allclose(t, (1 - tau) * b + tau * o)

    def test_critic_loss_trend(self):
        learner = sac.SACLearner(sac.SACConfig(batch_size=20), seed=5)
        buf = ReplayBuffer(100)
        for _ in range(40):
            buf.add(Transition((4.0, 3.0), 0.2, 0.6, (4.2, 3.1), False))
        losses = [learner.sac_update(buf, n_steps=1)[0]["critic1_loss"] for _ in range(50)]
        slope = np.polyfit(np.arange(50), np.log(losses), 1)[0]
        assert slope < 0
        assert losses[-1] < losses[0]

    def test_buffer_too_small(self):
        learner = sac.SACLearner(seed=0)
        with pytest.raises(ValueError):
            learner.sac_update(ReplayBuffer(10))

    def test_nan_aborts(self):
        learner = sac.SACLearner(sac.SACConfig(batch_size=4), seed=0)
        buf = ReplayBuffer(10)
        for _ in range(5):
            buf.add(Transition((1.0, 1.0), 0.0, float("nan"), (1.0, 1.0), False))
        before = [p.copy() for p in learner.q1.params]
        with pytest.raises(sac.TrainingDiverged) as info:
            learner.sac_update(buf, n_steps=1)
        assert "l1" in info.value.diagnostics
        assert all(np.array_equal(a, b) for a, b in zip(before, learner.q1.params))

import math

import numpy as np
import pytest

from graphprune import autodiff as ad
from graphprune.agent import (
    ActorNet, AgentConfig, CriticNet, DdpgAgent, ReplayBuffer, Transition,
    truncated_normal,
)
from helpers import check_gradients


def tn_moments(mu, sigma, low=0.0, high=1.0):
    """Closed-form mean/variance of a normal truncated to [low, high]."""
    phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    cdf = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))
    a, b = (low - mu) / sigma, (high - mu) / sigma
    z = cdf(b) - cdf(a)
    mean = mu + sigma * (phi(a) - phi(b)) / z
    var = sigma ** 2 * (1 + (a * phi(a) - b * phi(b)) / z
                        - ((phi(a) - phi(b)) / z) ** 2)
    return mean, var


def small_cfg(**kw):
    base = dict(hidden=(16, 16), batch_size=4, buffer_capacity=50,
                warmup_episodes=2, exploit_episodes=4, updates_per_episode=1)
    base.update(kw)
    return AgentConfig(**base)


def test_zero_noise_returns_policy_exactly():
    agent = DdpgAgent(3, small_cfg(), rng=np.random.default_rng(0))
    agent.sigma = 0.0
    s = np.array([0.1, -0.2, 0.5])
    assert agent.act(s, explore=True) == agent.policy(s)


@pytest.mark.parametrize("mu,sigma", [(0.5, 0.3), (0.2, 0.5), (0.8, 0.2)])
def test_truncated_normal_matches_closed_form_moments(mu, sigma):
    rng = np.random.default_rng(7)
    draws = np.array([truncated_normal(rng, mu, sigma) for _ in range(100_000)])
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    mean, var = tn_moments(mu, sigma)
    assert abs(draws.mean() - mean) <= 0.02 * abs(mean)
    assert abs(draws.var() - var) <= 0.02 * var


def test_truncated_normal_never_exceeds_one():
    rng = np.random.default_rng(8)
    draws = [truncated_normal(rng, 0.98, 0.5) for _ in range(20_000)]
    assert max(draws) <= 1.0


def test_replay_buffer_capacity_and_sampling_guard():
    buf = ReplayBuffer(capacity=10)
    for i in range(25):
        buf.push(Transition(np.zeros(2), 0.5, 0.0, np.zeros(2), False))
    assert len(buf) == 10
    with pytest.raises(ValueError, match="need 11"):
        buf.sample(11, np.random.default_rng(0))


def test_replay_buffer_sampling_is_uniform():
    buf = ReplayBuffer(capacity=500)
    for i in range(500):
        buf.push(Transition(np.array([float(i)]), 0.5, 0.0, np.zeros(1), False))
    rng = np.random.default_rng(9)
    counts = np.zeros(500)
    draws = 100_000
    for tr in (buf.sample(100, rng) for _ in range(draws // 100)):
        for t in tr:
            counts[int(t.state[0])] += 1
    # aggregate chi-square within 3 sigma of its mean; per-slot 3-sigma bands
    # would flag ~1.3 slots by chance alone
    expected = draws / 500
    chi2 = ((counts - expected) ** 2 / expected).sum()
    dof = 499
    assert abs(chi2 - dof) < 3 * math.sqrt(2 * dof)
    assert counts.min() > 0


def test_tau_one_soft_update_copies_online():
    agent = DdpgAgent(2, small_cfg(), rng=np.random.default_rng(1))
    for p in agent.actor.params.values():
        p.data += 0.37
    agent.soft_update(tau=1.0)
    for key, p in agent.actor.params.items():
        suffix = key.split(".", 1)[1]
        tp = agent.actor_target.params[f"actor_t.{suffix}"]
        assert np.array_equal(tp.data, p.data)


def test_soft_update_is_elementwise_contraction():
    agent = DdpgAgent(2, small_cfg(tau=0.25), rng=np.random.default_rng(2))
    online = agent.critic.params["critic.w0"]
    target = agent.critic_target.params["critic_t.w0"]
    target.data = online.data + 1.0
    before = np.abs(target.data - online.data)
    agent.soft_update()
    after = np.abs(target.data - online.data)
    assert np.allclose(after, 0.75 * before, atol=1e-12)


def test_terminal_target_drops_bootstrap_and_matches_hand_computation():
    cfg = small_cfg(batch_size=2, gamma=0.9)
    agent = DdpgAgent(2, cfg, rng=np.random.default_rng(3))
    agent.baseline = 0.25
    s1, s2 = np.array([0.1, 0.2]), np.array([-0.3, 0.4])
    trs = [
        Transition(s1, 0.6, 1.0, s2, False),
        Transition(s2, 0.4, -0.5, np.zeros(2), True),
    ]
    buf = ReplayBuffer(capacity=4)
    # fill so that sample() returns exactly these two (patch sampling)
    for tr in trs:
        buf.push(tr)
    buf.sample = lambda n, rng: trs

    with ad.no_grad():
        a_next = agent.actor_target.forward(ad.tensor(s2.reshape(1, -1))).item()
        q_next = agent.critic_target.forward_sa(
            ad.tensor(s2.reshape(1, -1)), ad.tensor([[a_next]])).item()
        q1 = agent.critic.forward_sa(ad.tensor(s1.reshape(1, -1)),
                                     ad.tensor([[0.6]])).item()
        q2 = agent.critic.forward_sa(ad.tensor(s2.reshape(1, -1)),
                                     ad.tensor([[0.4]])).item()
    y1 = 1.0 - 0.25 + 0.9 * q_next        # bootstrapped
    y2 = -0.5 - 0.25                       # terminal: no bootstrap term
    expected_loss = ((y1 - q1) ** 2 + (y2 - q2) ** 2) / 2.0

    stats = agent.update(buf)
    assert stats["critic_loss"] == pytest.approx(expected_loss, abs=1e-10)


def test_actor_and_critic_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    actor = ActorNet(3, hidden=(8, 8), rng=rng)
    critic = CriticNet(3, hidden=(8, 8), rng=rng)
    states = ad.tensor(rng.normal(size=(5, 3)))
    actions = ad.tensor(rng.uniform(size=(5, 1)))
    target = rng.normal(size=(5, 1))

    def actor_loss():
        out = actor.forward(states)
        d = ad.add(out, ad.tensor(-target))
        return ad.mean(ad.mul(d, d))

    check_gradients(actor_loss, actor.parameters().values(), rng, n_coords=5)

    def critic_loss():
        q = critic.forward_sa(states, actions)
        d = ad.add(q, ad.tensor(-target))
        return ad.mean(ad.mul(d, d))

    check_gradients(critic_loss, critic.parameters().values(), rng, n_coords=5)

    def joint_loss():
        return ad.neg(ad.mean(critic.forward_sa(states, actor.forward(states))))

    check_gradients(joint_loss, actor.parameters().values(), rng, n_coords=5)


def test_update_moves_actor_and_targets():
    rng = np.random.default_rng(5)
    agent = DdpgAgent(2, small_cfg(batch_size=8), rng=rng)
    buf = ReplayBuffer(capacity=32)
    for i in range(16):
        s = rng.normal(size=2)
        buf.push(Transition(s, float(rng.uniform(0.1, 1.0)),
                            float(rng.normal()), rng.normal(size=2), i % 4 == 3))
    before = agent.actor.params["actor.w0"].data.copy()
    before_t = agent.actor_target.params["actor_t.w0"].data.copy()
    agent.update(buf)
    assert not np.array_equal(agent.actor.params["actor.w0"].data, before)
    assert not np.array_equal(agent.actor_target.params["actor_t.w0"].data, before_t)
    # no stray gradients left anywhere
    for p in list(agent.parameters().values()):
        assert p.grad is None


def test_baseline_is_reward_ema():
    agent = DdpgAgent(2, small_cfg(baseline_decay=0.9), rng=np.random.default_rng(6))
    agent.update_baseline(1.0)
    assert agent.baseline == 1.0
    agent.update_baseline(0.0)
    assert agent.baseline == pytest.approx(0.9)


def test_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(tau=0.0)
    with pytest.raises(ValueError):
        AgentConfig(gamma=1.5)
    with pytest.raises(ValueError):
        AgentConfig(sigma_init=-0.1)

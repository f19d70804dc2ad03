"""Deterministic-policy-gradient agent over per-layer pruning ratios.

Actor and critic are two-hidden-layer MLPs (300 units each); the actor's
sigmoid head bounds actions inside (0, 1).  Exploration draws from a normal
distribution truncated to [0, 1] around the actor output, with exponentially
decaying scale.  Updates follow the classic recipe: critic regression onto
baseline-centered targets bootstrapped through target networks, actor ascent
on Q(s, mu(s)), then soft target updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import autodiff as ad


@dataclass
class AgentConfig:
    hidden: tuple = (300, 300)
    tau: float = 0.01                 # soft target update rate
    gamma: float = 1.0
    sigma_init: float = 0.5           # exploration noise scale
    sigma_decay: float = 0.99         # per exploit episode
    warmup_episodes: int = 100        # uniform-random episodes
    exploit_episodes: int = 300
    batch_size: int = 64
    buffer_capacity: int = 2000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    baseline_decay: float = 0.95      # EMA of episode rewards
    updates_per_episode: int = 5
    reward_broadcast: bool = True     # episode reward on every transition

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.sigma_init < 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma_init}")


@dataclass
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity=2000):
        self.capacity = capacity
        self.slots = []
        self.cursor = 0

    def push(self, transition: Transition):
        if len(self.slots) < self.capacity:
            self.slots.append(transition)
        else:
            self.slots[self.cursor] = transition
        self.cursor = (self.cursor + 1) % self.capacity

    def sample(self, batch_size, rng) -> list:
        if len(self.slots) < batch_size:
            raise ValueError(
                f"buffer holds {len(self.slots)} transitions, need {batch_size}")
        idx = rng.integers(0, len(self.slots), size=batch_size)
        return [self.slots[i] for i in idx]

    def __len__(self):
        return len(self.slots)


# ---------------------------------------------------------------------------
# Truncated-normal exploration
# ---------------------------------------------------------------------------

def truncated_normal(rng, mu, sigma, low=0.0, high=1.0):
    """Inverse-CDF sample from a normal restricted to [low, high]."""
    if sigma <= 0.0:
        return float(min(max(mu, low), high))
    alpha = (low - mu) / sigma
    beta = (high - mu) / sigma
    u = rng.uniform(ndtr(alpha), ndtr(beta))
    return float(min(max(mu + sigma * ndtri(u), low), high))


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class Mlp:
    """Fully connected net; relu hidden activations."""

    def __init__(self, dims, rng, name, out="linear", final_scale=3e-3):
        self.dims = tuple(dims)
        self.out = out
        self.params = {}
        for i, (fi, fo) in enumerate(zip(dims, dims[1:])):
            last = i == len(dims) - 2
            bound = final_scale if last else math.sqrt(6.0 / (fi + fo))
            self.params[f"{name}.w{i}"] = ad.param(
                rng.uniform(-bound, bound, size=(fi, fo)), name=f"{name}.w{i}")
            self.params[f"{name}.b{i}"] = ad.param(np.zeros(fo), name=f"{name}.b{i}")
        self._name = name

    def parameters(self):
        return self.params

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        h = x
        n_layers = len(self.dims) - 1
        for i in range(n_layers):
            h = ad.add(ad.matmul(h, self.params[f"{self._name}.w{i}"]),
                       self.params[f"{self._name}.b{i}"])
            if i < n_layers - 1:
                h = ad.relu(h)
        if self.out == "sigmoid":
            h = ad.sigmoid(h)
        return h


class ActorNet(Mlp):
    """state -> pruning ratio in (0, 1)."""

    def __init__(self, state_dim, hidden=(300, 300), rng=None, name="actor"):
        rng = rng or np.random.default_rng(0)
        super().__init__((state_dim, *hidden, 1), rng, name, out="sigmoid")


class CriticNet(Mlp):
    """(state, action) -> scalar value."""

    def __init__(self, state_dim, hidden=(300, 300), rng=None, name="critic"):
        rng = rng or np.random.default_rng(0)
        super().__init__((state_dim + 1, *hidden, 1), rng, name)

    def forward_sa(self, states: ad.Tensor, actions: ad.Tensor) -> ad.Tensor:
        return self.forward(ad.concat([states, actions], axis=1))


def _by_suffix(params: dict) -> dict:
    """Parameter map keyed by name without the net prefix (for target sync)."""
    return {key.split(".", 1)[1]: p for key, p in params.items()}


# ---------------------------------------------------------------------------
# Agent
# ---------------------------------------------------------------------------

class DdpgAgent:
    def __init__(self, state_dim, config: AgentConfig | None = None, rng=None):
        self.cfg = config or AgentConfig()
        self.rng = rng or np.random.default_rng(0)
        self.state_dim = state_dim
        self.actor = ActorNet(state_dim, self.cfg.hidden, self.rng, name="actor")
        self.critic = CriticNet(state_dim, self.cfg.hidden, self.rng, name="critic")
        self.actor_target = ActorNet(state_dim, self.cfg.hidden, self.rng,
                                     name="actor_t")
        self.critic_target = CriticNet(state_dim, self.cfg.hidden, self.rng,
                                       name="critic_t")
        self._sync_targets()
        self.actor_opt = ad.Adam(self.actor.parameters(), lr=self.cfg.actor_lr)
        self.critic_opt = ad.Adam(self.critic.parameters(), lr=self.cfg.critic_lr)
        self.sigma = self.cfg.sigma_init
        self.baseline = None

    def _sync_targets(self):
        for target, online in ((self.actor_target, self.actor),
                               (self.critic_target, self.critic)):
            src = _by_suffix(online.params)
            for suffix, tp in _by_suffix(target.params).items():
                tp.data = src[suffix].data.copy()

    def parameters(self):
        out = dict(self.actor.parameters())
        out.update(self.critic.parameters())
        return out

    # -- acting ------------------------------------------------------------

    def policy(self, state: np.ndarray) -> float:
        """Deterministic actor output for a single state."""
        with ad.no_grad():
            mu = self.actor.forward(ad.tensor(state.reshape(1, -1))).item()
        return mu

    def act(self, state: np.ndarray, explore: bool) -> float:
        """Action in (0, 1]: noisy around mu(s) when exploring."""
        mu = self.policy(state)
        a = truncated_normal(self.rng, mu, self.sigma) if explore else mu
        return max(a, 1e-4)  # keep the half-open action space

    def decay_noise(self):
        self.sigma *= self.cfg.sigma_decay

    def update_baseline(self, episode_reward: float):
        if self.baseline is None:
            self.baseline = float(episode_reward)
        else:
            d = self.cfg.baseline_decay
            self.baseline = d * self.baseline + (1.0 - d) * float(episode_reward)

    # -- learning ----------------------------------------------------------

    def update(self, buffer: ReplayBuffer) -> dict:
        """One critic step, one actor step, soft target updates."""
        batch = buffer.sample(self.cfg.batch_size, self.rng)
        states = np.stack([tr.state for tr in batch])
        actions = np.array([[tr.action] for tr in batch])
        rewards = np.array([tr.reward for tr in batch])
        nexts = np.stack([tr.next_state for tr in batch])
        terminal = np.array([tr.terminal for tr in batch], dtype=float)

        b = self.baseline if self.baseline is not None else 0.0
        with ad.no_grad():
            a_next = self.actor_target.forward(ad.tensor(nexts))
            q_next = self.critic_target.forward_sa(ad.tensor(nexts), a_next)
        targets = rewards - b + self.cfg.gamma * q_next.data[:, 0] * (1.0 - terminal)

        # critic regression onto the bootstrapped targets
        q = self.critic.forward_sa(ad.tensor(states), ad.tensor(actions))
        diff = ad.add(q, ad.tensor(-targets[:, None]))
        critic_loss = ad.mean(ad.mul(diff, diff))
        ad.backward(critic_loss)
        self.critic_opt.step()

        # actor ascent on Q(s, mu(s)); critic grads from this pass are discarded
        st = ad.tensor(states)
        actor_objective = ad.mean(self.critic.forward_sa(st, self.actor.forward(st)))
        ad.backward(ad.neg(actor_objective))
        self.actor_opt.step()
        self.critic_opt.zero_grad()

        self.soft_update()
        return {"critic_loss": critic_loss.item(),
                "actor_objective": actor_objective.item(),
                "baseline": b}

    def soft_update(self, tau=None):
        tau = self.cfg.tau if tau is None else tau
        for target, online in ((self.actor_target, self.actor),
                               (self.critic_target, self.critic)):
            src = _by_suffix(online.params)
            for suffix, tp in _by_suffix(target.params).items():
                tp.data = tau * src[suffix].data + (1.0 - tau) * tp.data


# ---------------------------------------------------------------------------
# Episode rollout
# ---------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    transitions: list
    outcome: object          # env-specific summary with .actions and .reward
    states: list = field(default_factory=list)
    raw_actions: list = field(default_factory=list)


def run_episode(env, provider, agent: DdpgAgent, buffer: ReplayBuffer | None,
                explore=True, warmup=False, rng=None) -> EpisodeResult:
    """Roll one episode: emit T actions, let the env rescale/evaluate, store
    the T transitions (executed actions, broadcast or terminal-only reward)."""
    rng = rng or agent.rng
    n = env.num_actions
    provider.reset()
    states, raw = [], []
    a_prev = 0.0
    for t in range(n):
        s = provider.next(a_prev)
        if warmup:
            a = float(1.0 - rng.uniform(0.0, 1.0))  # uniform over (0, 1]
        else:
            a = agent.act(s, explore=explore)
        states.append(s)
        raw.append(a)
        a_prev = a
    outcome = env.finish(raw)
    executed = list(outcome.actions)
    transitions = []
    for t in range(n):
        last = t == n - 1
        if agent.cfg.reward_broadcast:
            r = outcome.reward
        else:
            r = outcome.reward if last else 0.0
        nxt = states[t + 1] if not last else np.zeros_like(states[t])
        transitions.append(Transition(state=states[t], action=executed[t],
                                      reward=r, next_state=nxt, terminal=last))
    if buffer is not None:
        for tr in transitions:
            buffer.push(tr)
    return EpisodeResult(transitions=transitions, outcome=outcome,
                         states=states, raw_actions=raw)

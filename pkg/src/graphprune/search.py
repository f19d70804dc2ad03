"""Search drivers: learned-embedding policy search, random and
handcrafted-embedding baselines, and the multi-stage composition scheme.

Every driver is deterministic given its seed: all randomness flows from
numpy Generators keyed by (seed, stream tag), and episodes are strictly
sequential except for read-only candidate evaluation in the random baseline.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .agent import AgentConfig, DdpgAgent, ReplayBuffer, run_episode
from .decoder import RecurrentDecoder, unroll
from .encoder import EncoderConfig, GraphEncoder
from .env import (EnvConfig, FeasibilityError, HandcraftedStateProvider,
                  DecoderStateProvider, PruneEnv, layer_costs, total_cost)

ACTION_STREAM = 811
AGENT_STREAM = 223
MODEL_STREAM = 631


@dataclass
class SearchResult:
    best: object | None            # EpisodeOutcome of the best-reward episode
    best_episode: int
    logs: list = field(default_factory=list)
    encoder: object = None
    decoder: object = None
    agent: object = None


def _log_row(episode, outcome):
    return {
        "episode": episode,
        "reward": outcome.reward,
        "error": outcome.error,
        "flops_ratio": outcome.flops_ratio,
        "param_ratio": outcome.param_ratio,
        "actions": [round(float(a), 12) for a in outcome.actions],
    }


def _track_best(best, best_ep, episode, outcome):
    if best is None or outcome.reward > best.reward:
        return outcome, episode
    return best, best_ep


# ---------------------------------------------------------------------------
# Random baseline
# ---------------------------------------------------------------------------

def search_random(env, episodes, seed=0, workers=1) -> SearchResult:
    """Uniform actions through the same re-scaling/evaluation path; keeps the
    best-reward candidate.  Evaluation parallelizes only without fine-tuning
    (read-only forward passes); results are consumed in submission order."""
    rng = np.random.default_rng([seed, ACTION_STREAM])
    vectors = [1.0 - rng.uniform(size=env.num_actions) for _ in range(episodes)]
    if workers > 1 and not env.cfg.fast_finetune:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(env.finish, vectors))
    else:
        outcomes = [env.finish(v) for v in vectors]
    best, best_ep, logs = None, -1, []
    for i, outcome in enumerate(outcomes):
        best, best_ep = _track_best(best, best_ep, i, outcome)
        logs.append(_log_row(i, outcome))
    return SearchResult(best=best, best_episode=best_ep, logs=logs)


# ---------------------------------------------------------------------------
# Agent-driven searches
# ---------------------------------------------------------------------------

def _agent_loop(env, provider, agent, episodes, warmup, after_episode=None):
    buffer = ReplayBuffer(agent.cfg.buffer_capacity)
    best, best_ep, logs = None, -1, []
    for ep in range(episodes):
        is_warmup = ep < warmup
        result = run_episode(env, provider, agent, buffer,
                             explore=True, warmup=is_warmup)
        outcome = result.outcome
        agent.update_baseline(outcome.reward)
        if not is_warmup:
            agent.decay_noise()
            if len(buffer) >= agent.cfg.batch_size:
                for _ in range(agent.cfg.updates_per_episode):
                    agent.update(buffer)
            if after_episode is not None:
                after_episode(result)
        best, best_ep = _track_best(best, best_ep, ep, outcome)
        logs.append(_log_row(ep, outcome))
    return best, best_ep, logs


def search_learned(env, graph, episodes, warmup, seed=0,
                   agent_config: AgentConfig | None = None,
                   encoder_config: EncoderConfig | None = None,
                   learn_representation=True, freeze_encoder=False,
                   freeze_decoder=False, encoder=None, decoder=None) -> SearchResult:
    """Policy search with graph-encoder/decoder layer states.

    After each post-warmup episode the encoder and decoder take one ascent
    step on mean_t Q(s_t, mu(s_t)) over freshly recomputed states (the
    learnable-environment pathway); freeze flags support transfer protocols.
    """
    enc_cfg = encoder_config or EncoderConfig()
    agent_cfg = agent_config or AgentConfig()
    if encoder is None:
        encoder = GraphEncoder(graph, enc_cfg,
                               rng=np.random.default_rng([seed, MODEL_STREAM]))
    if decoder is None:
        decoder = RecurrentDecoder(enc_cfg.dim, enc_cfg.dim,
                                   rng=np.random.default_rng([seed, MODEL_STREAM, 2]))
    agent = DdpgAgent(enc_cfg.dim, agent_cfg,
                      rng=np.random.default_rng([seed, AGENT_STREAM]))
    provider = DecoderStateProvider(encoder, decoder, env.num_actions)
    enc_opt = ad.Adam(encoder.trainable(), lr=1e-3)
    dec_opt = ad.Adam(decoder.parameters(), lr=1e-3)

    def representation_step(result):
        if not learn_representation or (freeze_encoder and freeze_decoder):
            return
        rep = encoder.forward()
        states = unroll(decoder, rep, list(result.outcome.actions))
        stacked = ad.concat(states, axis=0)
        q = agent.critic.forward_sa(stacked, agent.actor.forward(stacked))
        ad.backward(ad.neg(ad.mean(q)))
        if freeze_encoder:
            enc_opt.zero_grad()
        else:
            enc_opt.step()
        if freeze_decoder:
            dec_opt.zero_grad()
        else:
            dec_opt.step()
        agent.actor_opt.zero_grad()
        agent.critic_opt.zero_grad()

    best, best_ep, logs = _agent_loop(env, provider, agent, episodes, warmup,
                                      after_episode=representation_step)
    return SearchResult(best=best, best_episode=best_ep, logs=logs,
                        encoder=encoder, decoder=decoder, agent=agent)


def search_handcrafted(env, episodes, warmup, seed=0,
                       agent_config: AgentConfig | None = None) -> SearchResult:
    """Same agent, but states are the 11-feature bookkeeping vectors."""
    from .env import HANDCRAFTED_WIDTH
    agent_cfg = agent_config or AgentConfig()
    agent = DdpgAgent(HANDCRAFTED_WIDTH, agent_cfg,
                      rng=np.random.default_rng([seed, AGENT_STREAM]))
    provider = HandcraftedStateProvider(env)
    best, best_ep, logs = _agent_loop(env, provider, agent, episodes, warmup)
    return SearchResult(best=best, best_episode=best_ep, logs=logs, agent=agent)


def search_surrogate(env, episodes, warmup, seed=0,
                     agent_config: AgentConfig | None = None) -> SearchResult:
    """Agent on a self-providing environment (fixed states)."""
    agent_cfg = agent_config or AgentConfig()
    agent = DdpgAgent(env.state_dim, agent_cfg,
                      rng=np.random.default_rng([seed, AGENT_STREAM]))
    best, best_ep, logs = _agent_loop(env, env, agent, episodes, warmup)
    return SearchResult(best=best, best_episode=best_ep, logs=logs, agent=agent)


# ---------------------------------------------------------------------------
# Multi-stage composition
# ---------------------------------------------------------------------------

class StageError(RuntimeError):
    def __init__(self, stage, achieved_ratio, inner):
        super().__init__(f"stage {stage} infeasible after cumulative FLOPs ratio "
                         f"{achieved_ratio:.3f}: {inner}")
        self.stage = stage
        self.achieved_ratio = achieved_ratio


@dataclass
class StagedResult:
    channel_masks: dict
    element_masks: dict
    flops_ratio: float
    param_ratio: float
    stages: list                    # per-stage SearchResult


def staged_search(desc, net, dataset, env_config: EnvConfig, plan,
                  runner, seed=0) -> StagedResult:
    """Run ``runner(env, stage_seed)`` per stage target, composing masks.

    Each stage's target is a fraction of the *current* (already pruned)
    prunable cost; masks only ever grow.  An empty plan returns the base
    model unchanged.
    """
    channel_masks, element_masks = {}, {}
    stages = []
    dense = total_cost(layer_costs(desc, net, prune_mode=env_config.prune_mode))
    for k, frac in enumerate(plan):
        cfg = EnvConfig(protocol=env_config.protocol, target_frac=frac,
                        a_max=env_config.a_max, prune_mode=env_config.prune_mode,
                        fast_finetune=env_config.fast_finetune,
                        finetune_steps=env_config.finetune_steps,
                        finetune_lr=env_config.finetune_lr,
                        share_coupled=env_config.share_coupled,
                        redistribute=env_config.redistribute)
        current = total_cost(layer_costs(desc, net, channel_masks, element_masks,
                                         env_config.prune_mode))
        try:
            env = PruneEnv(desc, net, dataset, cfg, seed=[seed, k],
                           base_channel_masks=channel_masks,
                           base_element_masks=element_masks)
            result = runner(env, k)
        except FeasibilityError as exc:
            raise StageError(k, current[0] / dense[0], exc) from exc
        if result.best is None:
            raise StageError(k, current[0] / dense[0],
                             FeasibilityError("stage produced no candidate"))
        channel_masks = result.best.channel_masks
        element_masks = result.best.element_masks
        stages.append(result)
    final = total_cost(layer_costs(desc, net, channel_masks, element_masks,
                                   env_config.prune_mode))
    return StagedResult(channel_masks=channel_masks, element_masks=element_masks,
                        flops_ratio=final[0] / dense[0],
                        param_ratio=final[1] / dense[1], stages=stages)

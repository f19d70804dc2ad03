"""Compression environment: cost accounting, action re-scaling, structured and
fine-grained pruning, candidate evaluation, and rewards.

An episode emits one pruning ratio per prunable layer.  The environment
clamps raw actions to the per-layer upper bound, proportionally boosts them
when the requested total reduction is not met (clamping at the bound, which
may leave a shortfall), applies the masks, optionally fine-tunes briefly, and
scores the candidate on the validation split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .hgraph import INPUT_STATE, ModelDesc
from .network import RunnableNet, accuracy, train_steps


class FeasibilityError(RuntimeError):
    """Requested reduction unreachable even at the action upper bound."""


PROTOCOLS = ("r_err", "r_flops", "r_param")


def reward_value(protocol: str, error: float, flops: float, params: float) -> float:
    """Candidate score: -error, optionally scaled by log model cost."""
    if protocol == "r_err":
        return -error
    if protocol == "r_flops":
        return -error * math.log(max(flops, 1.0))
    if protocol == "r_param":
        return -error * math.log(max(params, 1.0))
    raise ValueError(f"unknown reward protocol {protocol!r}; expected {PROTOCOLS}")


# ---------------------------------------------------------------------------
# Cost accounting (multiply-add = 2 FLOPs; weight elements only, no biases)
# ---------------------------------------------------------------------------

@dataclass
class LayerCost:
    index: int
    layer_id: str
    kind: str
    flops: int
    params: int
    prunable: bool


def conv_flops(k, c_in, c_out, out_h, out_w) -> int:
    return 2 * k * k * c_in * c_out * out_h * out_w


def layer_costs(desc: ModelDesc, net: RunnableNet, channel_masks=None,
                element_masks=None, prune_mode="channel") -> list:
    """Integer-exact per-layer FLOPs/parameter counts under the given masks."""
    channel_masks = channel_masks or {}
    element_masks = element_masks or {}
    alive, _ = net.alive_in(channel_masks)
    costs = []
    for rec in desc.layers:
        if rec.kind == "conv":
            in_alive = alive[rec.id]
            mask = channel_masks.get(rec.id)
            out_alive = (np.asarray(mask, dtype=bool) if mask is not None
                         else np.ones(rec.out_channels, dtype=bool))
            if rec.id in element_masks:
                kept = (element_masks[rec.id]
                        & out_alive[:, None, None, None]
                        & in_alive[None, :, None, None])
                kept_el = int(kept.sum())
            else:
                kept_el = rec.k * rec.k * int(in_alive.sum()) * int(out_alive.sum())
            # each kept weight element is one multiply-add per output position
            flops = 2 * kept_el * rec.out_h * rec.out_w
            params = kept_el
            prunable = True
        elif rec.kind == "linear":
            spatial = rec.in_h * rec.in_w
            in_alive = np.repeat(alive[rec.id], spatial)
            if rec.id in element_masks:
                kept_el = int((element_masks[rec.id]
                               & in_alive[:, None]).sum())
            else:
                kept_el = int(in_alive.sum()) * rec.out_features
            flops = 2 * kept_el
            params = kept_el
            prunable = prune_mode in ("fine_grained", "mixed")
        else:
            costs.append(LayerCost(rec.index, rec.id, rec.kind, 0, 0, False))
            continue
        costs.append(LayerCost(rec.index, rec.id, rec.kind, int(flops), int(params),
                               prunable))
    return costs


def total_cost(costs) -> tuple:
    return (sum(c.flops for c in costs), sum(c.params for c in costs))


# ---------------------------------------------------------------------------
# Action re-scaling toward the requested reduction
# ---------------------------------------------------------------------------

def rescale_actions(actions, a_max, layer_sizes, target, redistribute=False):
    """Boost per-layer ratios proportionally until the weighted sum meets the
    target, clamping each at ``a_max``.

    Boosts use the pre-loop action sum, so when no clamp activates the
    achieved reduction equals the target exactly.  Clamping can leave a
    shortfall; ``redistribute=True`` repeats the boost over unclamped layers.
    """
    a = np.asarray(actions, dtype=float)
    w = np.asarray(layer_sizes, dtype=float)
    if a.shape != w.shape:
        raise ValueError(f"actions shape {a.shape} != layer sizes shape {w.shape}")
    if np.any(a <= 0.0) or np.any(a > 1.0):
        raise ValueError("actions must lie in (0, 1]")
    if not 0.0 < a_max <= 1.0:
        raise ValueError(f"a_max must be in (0, 1], got {a_max}")
    if target > a_max * w.sum() + 1e-9:
        raise FeasibilityError(
            f"reduction {target} unreachable: bound {a_max} allows at most "
            f"{a_max * w.sum()}")
    reduced = float(w @ a)
    if reduced >= target:
        return a.copy()
    rest = target - reduced
    boosted = np.minimum(a_max, a + (rest * (a / a.sum())) / w)
    if redistribute:
        for _ in range(32):
            shortfall = target - float(w @ boosted)
            free = boosted < a_max - 1e-12
            if shortfall <= 1e-12 or not free.any():
                break
            share = boosted[free] / boosted[free].sum()
            boosted[free] = np.minimum(a_max, boosted[free]
                                       + (shortfall * share) / w[free])
    return boosted


# ---------------------------------------------------------------------------
# Mask construction
# ---------------------------------------------------------------------------

def channel_importance(weight: np.ndarray) -> np.ndarray:
    """L1 norm per output channel (filter)."""
    return np.abs(weight).sum(axis=tuple(range(1, weight.ndim)))


def prune_channels_by_score(scores: np.ndarray, ratio: float, base_mask=None):
    """Mask the lowest-scoring fraction of currently-kept channels.

    Returns (mask, clamped): never removes the last channel.  Masks only
    grow, so staged pruning is monotone by construction.
    """
    n = len(scores)
    mask = (np.ones(n, dtype=bool) if base_mask is None
            else np.asarray(base_mask, dtype=bool).copy())
    kept = np.flatnonzero(mask)
    n_prune = int(ratio * len(kept))
    clamped = False
    if n_prune >= len(kept):
        n_prune = len(kept) - 1
        clamped = True
    if n_prune <= 0:
        return mask, clamped
    order = np.argsort(scores[kept], kind="stable")
    mask[kept[order[:n_prune]]] = False
    return mask, clamped


def apply_channel_pruning(weight: np.ndarray, ratio: float, base_mask=None):
    """L1-ranked structured pruning of one layer's output channels."""
    return prune_channels_by_score(channel_importance(weight), ratio, base_mask)


def apply_fine_grained_pruning(weight: np.ndarray, ratio: float, base_mask=None):
    """Mask the smallest-magnitude fraction of currently-kept elements,
    always keeping at least the single largest one."""
    mask = (np.ones(weight.shape, dtype=bool) if base_mask is None
            else np.asarray(base_mask, dtype=bool).copy())
    kept = np.flatnonzero(mask.reshape(-1))
    n_prune = int(ratio * len(kept))
    if n_prune >= len(kept):
        n_prune = len(kept) - 1
    if n_prune <= 0:
        return mask
    flat = np.abs(weight.reshape(-1)[kept])
    order = np.argsort(flat, kind="stable")
    flat_mask = mask.reshape(-1)
    flat_mask[kept[order[:n_prune]]] = False
    return flat_mask.reshape(weight.shape)


def coupled_groups(desc: ModelDesc) -> list:
    """Groups of conv layers whose outputs converge at a join and therefore
    share a channel mask (same channels must survive on every path)."""
    parent = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        parent[find(x)] = find(y)

    producer = {INPUT_STATE: None}
    for rec in desc.layers:
        if rec.kind in ("conv", "linear"):
            producer[rec.id] = rec.id
        elif rec.kind == "join":
            contribs = [producer[rec.after]]
            contribs += [producer[s] for s in rec.join_of]
            if rec.join_from is not None:
                contribs.append(producer[rec.join_from])
            named = [c for c in contribs if c is not None]
            for a, b in zip(named, named[1:]):
                union(a, b)
            producer[rec.id] = named[0] if named else None
        else:
            producer[rec.id] = producer[rec.after]
    groups = {}
    for rec in desc.layers:
        if rec.kind == "conv":
            root = find(rec.id)
            groups.setdefault(root, []).append(rec.id)
    return [g for g in groups.values() if len(g) > 1]


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------

@dataclass
class EpisodeOutcome:
    actions: list                 # executed (clamped + rescaled) ratios
    reward: float
    error: float
    flops: int
    params: int
    flops_ratio: float
    param_ratio: float
    achieved_reduction: float
    channel_masks: dict = field(default_factory=dict)
    element_masks: dict = field(default_factory=dict)
    clamped: bool = False


@dataclass
class EnvConfig:
    protocol: str = "r_err"
    target_frac: float | None = 0.5     # of prunable FLOPs; None disables rescaling
    a_max: float = 0.8
    prune_mode: str = "channel"         # channel | fine_grained | mixed
    fast_finetune: bool = False
    finetune_steps: int = 50
    finetune_lr: float = 1e-3
    share_coupled: bool = True
    redistribute: bool = False

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.prune_mode not in ("channel", "fine_grained", "mixed"):
            raise ValueError(f"unknown prune mode {self.prune_mode!r}")


class PruneEnv:
    """Hosts a target network and scores per-layer pruning-ratio vectors."""

    def __init__(self, desc: ModelDesc, net: RunnableNet, dataset,
                 config: EnvConfig | None = None, seed=0,
                 base_channel_masks=None, base_element_masks=None):
        self.desc = desc
        self.net = net
        self.data = dataset
        self.cfg = config or EnvConfig()
        # flat int tuple so per-episode child seeds can extend it
        self.seed = tuple(int(s) for s in np.atleast_1d(seed))
        self.base_channel_masks = dict(base_channel_masks or {})
        self.base_element_masks = dict(base_element_masks or {})
        self._episode = 0

        self.base_costs = layer_costs(desc, net, self.base_channel_masks,
                                      self.base_element_masks, self.cfg.prune_mode)
        self.dense_costs = layer_costs(desc, net, prune_mode=self.cfg.prune_mode)
        self.prunable = self._prunable_layers()
        if not self.prunable:
            raise FeasibilityError("model has no prunable layers for this mode")
        self.groups = coupled_groups(desc) if self.cfg.share_coupled else []
        self._group_of = {}
        for group in self.groups:
            for lid in group:
                self._group_of[lid] = group

        self.layer_sizes = np.array([self._cost_of(lid).flops if
                                     self.cfg.prune_mode != "fine_grained"
                                     else self._cost_of(lid).params
                                     for lid in self.prunable], dtype=float)
        if self.cfg.target_frac is not None:
            self.target = self.cfg.target_frac * self.layer_sizes.sum()
            if self.target > self.cfg.a_max * self.layer_sizes.sum() + 1e-9:
                raise FeasibilityError(
                    f"target reduction {self.cfg.target_frac:.0%} of prunable cost "
                    f"exceeds the a_max={self.cfg.a_max} ceiling")
        else:
            self.target = None

    def _prunable_layers(self) -> list:
        mode = self.cfg.prune_mode
        keep = []
        for rec in self.desc.layers:
            if rec.kind == "conv" and mode in ("channel", "mixed", "fine_grained"):
                keep.append(rec.id)
            elif rec.kind == "linear" and mode in ("fine_grained", "mixed"):
                keep.append(rec.id)
        if self.cfg.share_coupled and mode in ("channel", "mixed"):
            # one action per coupled group: keep the first member only
            drop = set()
            for group in coupled_groups(self.desc):
                drop.update(group[1:])
            keep = [lid for lid in keep if lid not in drop]
        return keep

    def _cost_of(self, layer_id) -> LayerCost:
        for c in self.base_costs:
            if c.layer_id == layer_id:
                return c
        raise KeyError(layer_id)

    @property
    def num_actions(self):
        return len(self.prunable)

    def prunable_records(self):
        return [self.desc.layer(lid) for lid in self.prunable]

    # -- pruning -------------------------------------------------------------

    def build_masks(self, ratios) -> tuple:
        """Per-layer masks from executed ratios; composes over base masks."""
        channel_masks = dict(self.base_channel_masks)
        element_masks = dict(self.base_element_masks)
        clamped = False
        for lid, ratio in zip(self.prunable, ratios):
            rec = self.desc.layer(lid)
            mode = self.cfg.prune_mode
            structured = rec.kind == "conv" and mode in ("channel", "mixed")
            if structured:
                members = self._group_of.get(lid, [lid])
                scores = sum(channel_importance(self.net.params[f"{m}.w"].data)
                             for m in members)
                mask, was_clamped = prune_channels_by_score(
                    scores, ratio, channel_masks.get(lid))
                clamped |= was_clamped
                for member in members:
                    channel_masks[member] = mask.copy()
            else:
                weight = self.net.params[f"{lid}.w"].data
                element_masks[lid] = apply_fine_grained_pruning(
                    weight, ratio, element_masks.get(lid))
        return channel_masks, element_masks, clamped

    # -- evaluation ----------------------------------------------------------

    def evaluate_candidate(self, channel_masks, element_masks,
                           fast_finetune=None, rng=None) -> tuple:
        """(error, flops_ratio, param_ratio) for a masked candidate."""
        ft = self.cfg.fast_finetune if fast_finetune is None else fast_finetune
        costs = layer_costs(self.desc, self.net, channel_masks, element_masks,
                            self.cfg.prune_mode)
        flops, params = total_cost(costs)
        dense_flops, dense_params = total_cost(self.dense_costs)
        net = self.net
        if ft:
            rng = rng or np.random.default_rng(self.seed)
            snap = net.snapshot()
            loss = train_steps(net, self.data.train_x, self.data.train_y,
                               self.cfg.finetune_steps, rng, lr=self.cfg.finetune_lr,
                               channel_masks=channel_masks,
                               element_masks=element_masks)
            if not np.isfinite(loss):
                net.restore(snap)
                return 1.0, flops / dense_flops, params / dense_params
            err = 1.0 - accuracy(net, self.data.val_x, self.data.val_y,
                                 channel_masks, element_masks)
            net.restore(snap)
        else:
            err = 1.0 - accuracy(net, self.data.val_x, self.data.val_y,
                                 channel_masks, element_masks)
        return err, flops / dense_flops, params / dense_params

    # -- episode -------------------------------------------------------------

    def finish(self, raw_actions) -> EpisodeOutcome:
        """Clamp, re-scale, prune, evaluate, and score one action vector."""
        if len(raw_actions) != self.num_actions:
            raise ValueError(f"expected {self.num_actions} actions, "
                             f"got {len(raw_actions)}")
        a = np.clip(np.asarray(raw_actions, dtype=float), 1e-4, self.cfg.a_max)
        if self.target is not None:
            executed = rescale_actions(a, self.cfg.a_max, self.layer_sizes,
                                       self.target,
                                       redistribute=self.cfg.redistribute)
        else:
            executed = a
        channel_masks, element_masks, clamped = self.build_masks(executed)
        self._episode += 1
        rng = np.random.default_rng([*self.seed, self._episode])
        error, flops_ratio, param_ratio = self.evaluate_candidate(
            channel_masks, element_masks, rng=rng)
        costs = layer_costs(self.desc, self.net, channel_masks, element_masks,
                            self.cfg.prune_mode)
        flops, params = total_cost(costs)
        reward = reward_value(self.cfg.protocol, error, flops, params)
        achieved = float(self.layer_sizes @ executed)
        return EpisodeOutcome(
            actions=[float(x) for x in executed], reward=reward, error=error,
            flops=flops, params=params, flops_ratio=flops_ratio,
            param_ratio=param_ratio, achieved_reduction=achieved,
            channel_masks=channel_masks, element_masks=element_masks,
            clamped=clamped)


# ---------------------------------------------------------------------------
# Alternative state representations
# ---------------------------------------------------------------------------

HANDCRAFTED_WIDTH = 11


class HandcraftedStateProvider:
    """Bookkeeping feature vectors (one per prunable layer):
    (index, out, in, h, w, stride, k, layer cost, reduced, rest, prev action),
    min-max normalized across layers for the static fields and by total cost
    for the running ones."""

    def __init__(self, env: PruneEnv):
        self.env = env
        rows = []
        for lid in env.prunable:
            rec = env.desc.layer(lid)
            cost = env._cost_of(lid)
            k = rec.k if rec.kind == "conv" else 1
            rows.append([rec.index, rec.out_width, rec.in_channels, rec.in_h,
                         rec.in_w, rec.stride, k, cost.flops])
        rows = np.asarray(rows, dtype=float)
        lo, hi = rows.min(axis=0), rows.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        self.static = (rows - lo) / span
        self.sizes = env.layer_sizes
        self.total = float(self.sizes.sum())
        self.reset()

    def reset(self):
        self.t = 0
        self.reduced = 0.0

    def next(self, a_prev: float) -> np.ndarray:
        if self.t > 0:
            self.reduced += self.sizes[self.t - 1] * a_prev
        rest = float(self.sizes[self.t + 1:].sum())
        vec = np.concatenate([
            self.static[self.t],
            [self.reduced / self.total, rest / self.total,
             a_prev if self.t > 0 else 0.0],
        ])
        self.t += 1
        return vec


class DecoderStateProvider:
    """Layer states from the graph encoder-decoder pipeline (rollout only,
    gradients excluded)."""

    def __init__(self, graph_encoder, rec_decoder, num_layers):
        self.encoder = graph_encoder
        self.decoder = rec_decoder
        self.num_layers = num_layers
        self.ctx = None

    def reset(self):
        with ad.no_grad():
            rep = self.encoder.forward()
            self.ctx = self.decoder.init_sequence(rep, self.num_layers)

    def next(self, a_prev: float) -> np.ndarray:
        with ad.no_grad():
            state = self.ctx.next_state(a_prev)
        return state.data[0].copy()


@dataclass
class SurrogateOutcome:
    actions: list
    reward: float
    error: float = 0.0
    flops_ratio: float = 1.0
    param_ratio: float = 1.0


class SurrogateEnv:
    """Quadratic-reward stand-in with known optimum ratios; it is its own
    state provider (one-hot layer index states)."""

    def __init__(self, optima=(0.7, 0.3, 0.5)):
        self.optima = np.asarray(optima, dtype=float)
        self.t = 0

    @property
    def num_actions(self):
        return len(self.optima)

    @property
    def state_dim(self):
        return len(self.optima)

    def reset(self):
        self.t = 0

    def next(self, a_prev: float) -> np.ndarray:
        s = np.zeros(len(self.optima))
        s[self.t] = 1.0
        self.t += 1
        return s

    def finish(self, raw_actions) -> SurrogateOutcome:
        a = np.asarray(raw_actions, dtype=float)
        reward = -float(((a - self.optima) ** 2).sum())
        return SurrogateOutcome(actions=[float(x) for x in a], reward=reward)

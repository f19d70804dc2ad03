"""Runnable networks built from model descriptions, with mask-aware forward.

Weights live in the autodiff engine.  Pruning is represented by explicit
boolean masks: per-layer output-channel masks for structured pruning and
per-element weight masks for fine-grained pruning.  Masked weights (and the
downstream weights that read masked channels) are multiplied to zero inside
forward, so they contribute nothing while the dense storage stays intact.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .hgraph import INPUT_STATE, ModelDesc


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class RunnableNet:
    """Forward-executable network for a validated model description."""

    def __init__(self, desc: ModelDesc, rng=None):
        rng = rng or np.random.default_rng(0)
        self.desc = desc
        self.params = {}
        self.bn_stats = {}
        for rec in desc.layers:
            if rec.kind == "conv":
                fan_in = rec.in_channels * rec.k * rec.k
                self.params[f"{rec.id}.w"] = ad.param(
                    _he(rng, (rec.out_channels, rec.in_channels, rec.k, rec.k), fan_in),
                    name=f"{rec.id}.w")
                self.params[f"{rec.id}.b"] = ad.param(
                    np.zeros(rec.out_channels), name=f"{rec.id}.b")
            elif rec.kind == "linear":
                self.params[f"{rec.id}.w"] = ad.param(
                    _he(rng, (rec.in_features, rec.out_features), rec.in_features),
                    name=f"{rec.id}.w")
                self.params[f"{rec.id}.b"] = ad.param(
                    np.zeros(rec.out_features), name=f"{rec.id}.b")
            elif rec.kind == "batchnorm":
                ch = rec.in_channels
                self.params[f"{rec.id}.gamma"] = ad.param(np.ones(ch),
                                                          name=f"{rec.id}.gamma")
                self.params[f"{rec.id}.beta"] = ad.param(np.zeros(ch),
                                                         name=f"{rec.id}.beta")
                self.bn_stats[rec.id] = (np.zeros(ch), np.ones(ch))

    def parameters(self):
        return self.params

    def snapshot(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap):
        for k, p in self.params.items():
            p.data = snap[k].copy()

    def clone(self) -> "RunnableNet":
        other = RunnableNet(self.desc)
        other.restore(self.snapshot())
        for rec_id, (m, v) in self.bn_stats.items():
            other.bn_stats[rec_id] = (m.copy(), v.copy())
        return other

    # -- masks ---------------------------------------------------------------

    def alive_in(self, channel_masks=None):
        """Per-record boolean mask of input channels that can be nonzero.

        Follows the data flow: a conv's output carrier is its own mask;
        pointwise/pool layers propagate; joins OR their contributors (a
        channel is dead only if every incoming path is masked).
        """
        channel_masks = channel_masks or {}
        carrier = {INPUT_STATE: np.ones(self.desc.in_channels, dtype=bool)}
        alive = {}
        for rec in self.desc.layers:
            inc = carrier[rec.after]
            alive[rec.id] = inc
            if rec.kind in ("conv", "linear"):
                mask = channel_masks.get(rec.id)
                out = (np.asarray(mask, dtype=bool) if mask is not None
                       else np.ones(rec.out_width, dtype=bool))
            elif rec.kind == "join":
                out = inc.copy()
                for other in rec.join_of:
                    out |= carrier[other]
                if rec.join_from is not None:
                    out |= carrier[rec.join_from]
            else:
                out = inc
            carrier[rec.id] = out
        return alive, carrier

    # -- forward ---------------------------------------------------------------

    def forward(self, x, channel_masks=None, element_masks=None) -> ad.Tensor:
        """Logits for a batch (N, C, H, W); masks zero out pruned structure."""
        channel_masks = channel_masks or {}
        element_masks = element_masks or {}
        alive, _ = self.alive_in(channel_masks)
        states = {INPUT_STATE: x if isinstance(x, ad.Tensor) else ad.tensor(x)}
        out_state = INPUT_STATE
        for rec in self.desc.layers:
            src = states[rec.after]
            if rec.kind == "conv":
                w = self.params[f"{rec.id}.w"]
                b = self.params[f"{rec.id}.b"]
                factor = np.ones(w.shape)
                factor *= alive[rec.id][None, :, None, None]
                bias_factor = np.ones(rec.out_channels)
                if rec.id in channel_masks:
                    keep = np.asarray(channel_masks[rec.id], dtype=float)
                    factor *= keep[:, None, None, None]
                    bias_factor = keep
                if rec.id in element_masks:
                    factor *= element_masks[rec.id]
                out = ad.conv2d(src, ad.mul(w, ad.tensor(factor)),
                                bias=ad.mul(b, ad.tensor(bias_factor)),
                                stride=rec.stride, pad=rec.pad)
            elif rec.kind == "linear":
                flat = ad.reshape(src, (src.shape[0], rec.in_features))
                w = self.params[f"{rec.id}.w"]
                b = self.params[f"{rec.id}.b"]
                spatial = rec.in_h * rec.in_w
                factor = np.repeat(alive[rec.id].astype(float), spatial)[:, None]
                factor = factor * np.ones(w.shape)
                if rec.id in element_masks:
                    factor *= element_masks[rec.id]
                out = ad.add(ad.matmul(flat, ad.mul(w, ad.tensor(factor))), b)
            elif rec.kind == "relu":
                out = ad.relu(src)
            elif rec.kind == "batchnorm":
                mean_, var_ = self.bn_stats[rec.id]
                keep = ad.tensor(alive[rec.id].astype(float))
                out = ad.batchnorm_inference(
                    src, ad.mul(self.params[f"{rec.id}.gamma"], keep),
                    ad.mul(self.params[f"{rec.id}.beta"], keep), mean_, var_)
            elif rec.kind == "maxpool":
                out = ad.maxpool2d(src, rec.k, rec.stride)
            elif rec.kind == "avgpool":
                out = ad.avgpool2d(src, rec.k, rec.stride)
            elif rec.kind == "pad":
                out = ad.pad2d(src, rec.pad)
            elif rec.kind == "join":
                out = src
                for other in rec.join_of:
                    out = ad.add(out, states[other])
                if rec.join_from is not None:
                    out = ad.add(out, states[rec.join_from])
            else:
                raise ValueError(f"unsupported layer kind {rec.kind!r}")
            states[rec.id] = out
            out_state = rec.id
        return states[out_state]


# ---------------------------------------------------------------------------
# Supervised helpers
# ---------------------------------------------------------------------------

def cross_entropy(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    n, k = logits.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    logp = ad.log(ad.add(ad.softmax_rows(logits), 1e-12))
    return ad.neg(ad.mean(ad.sum_(ad.mul(logp, ad.tensor(onehot)), axis=1)))


def accuracy(net: RunnableNet, x, y, channel_masks=None, element_masks=None,
             batch=512) -> float:
    hits = 0
    with ad.no_grad():
        for lo in range(0, len(x), batch):
            logits = net.forward(x[lo:lo + batch], channel_masks, element_masks)
            hits += int((logits.data.argmax(axis=1) == y[lo:lo + batch]).sum())
    return hits / len(x)


def train_steps(net: RunnableNet, x, y, steps, rng, lr=3e-3, batch=64,
                channel_masks=None, element_masks=None) -> float:
    """Adam training; returns the final loss (nan on divergence)."""
    opt = ad.Adam(net.parameters(), lr=lr)
    loss_val = float("nan")
    for _ in range(steps):
        idx = rng.integers(0, len(x), size=batch)
        logits = net.forward(x[idx], channel_masks, element_masks)
        loss = cross_entropy(logits, y[idx])
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            ad.active_tape().reset()
            return loss_val
        ad.backward(loss)
        opt.step()
    return loss_val

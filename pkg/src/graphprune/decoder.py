"""Recurrent decoder: unrolls per-layer state vectors from a graph
representation and the running action sequence.

An LSTM-style cell consumes the previous layer state concatenated with the
previous action (scalar); the hidden state is the emitted layer state, so
entries stay inside [-1, 1].  The initial state is a learned linear
projection of the whole-graph representation; the step-zero action is 0.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad


def _uniform(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class RecurrentDecoder:
    """Shared weights for every episode's state sequence."""

    def __init__(self, graph_dim, state_dim=32, rng=None, name="decoder"):
        rng = rng or np.random.default_rng(0)
        self.graph_dim = graph_dim
        self.state_dim = state_dim
        in_dim = state_dim + 1  # previous state plus the previous action
        self.params = {
            f"{name}.proj.w": ad.param(_uniform(rng, graph_dim, state_dim),
                                       name=f"{name}.proj.w"),
            f"{name}.proj.b": ad.param(np.zeros(state_dim), name=f"{name}.proj.b"),
            f"{name}.cell.w": ad.param(_uniform(rng, in_dim, 4 * state_dim),
                                       name=f"{name}.cell.w"),
            f"{name}.cell.b": ad.param(np.zeros(4 * state_dim), name=f"{name}.cell.b"),
        }
        self._name = name

    def parameters(self):
        return self.params

    def init_sequence(self, graph_repr, num_layers: int) -> "DecoderContext":
        """Start an episode context for ``num_layers`` state emissions."""
        if num_layers < 1:
            raise ValueError(f"init_sequence: layer count must be >= 1, got {num_layers}")
        if not isinstance(graph_repr, ad.Tensor):
            graph_repr = ad.tensor(graph_repr)
        row = ad.reshape(graph_repr, (1, self.graph_dim))
        s0 = ad.add(ad.matmul(row, self.params[f"{self._name}.proj.w"]),
                    self.params[f"{self._name}.proj.b"])
        return DecoderContext(self, s0, num_layers)


class DecoderContext:
    """Per-episode unroll state; emits exactly ``num_layers`` states."""

    def __init__(self, decoder, s0, num_layers):
        self.decoder = decoder
        self.state = s0                       # (1, d) tensor
        self.cell = ad.tensor(np.zeros((1, decoder.state_dim)))
        self.num_layers = num_layers
        self.steps_taken = 0

    def next_state(self, action_prev: float) -> ad.Tensor:
        """Emit the next layer state from (previous state, previous action)."""
        if self.steps_taken >= self.num_layers:
            raise RuntimeError(
                f"decoder context exhausted: {self.num_layers} states already emitted")
        d = self.decoder.state_dim
        name = self.decoder._name
        a = ad.tensor(np.array([[float(action_prev)]]))
        z = ad.concat([self.state, a], axis=1)
        gates = ad.add(ad.matmul(z, self.decoder.params[f"{name}.cell.w"]),
                       self.decoder.params[f"{name}.cell.b"])
        i = ad.sigmoid(ad.slice_(gates, (slice(None), slice(0, d))))
        f = ad.sigmoid(ad.slice_(gates, (slice(None), slice(d, 2 * d))))
        o = ad.sigmoid(ad.slice_(gates, (slice(None), slice(2 * d, 3 * d))))
        g = ad.tanh(ad.slice_(gates, (slice(None), slice(3 * d, 4 * d))))
        self.cell = ad.add(ad.mul(f, self.cell), ad.mul(i, g))
        self.state = ad.mul(o, ad.tanh(self.cell))
        self.steps_taken += 1
        return self.state


def init_sequence(decoder: RecurrentDecoder, graph_repr, num_layers) -> DecoderContext:
    return decoder.init_sequence(graph_repr, num_layers)


def next_state(ctx: DecoderContext, action_prev: float) -> ad.Tensor:
    return ctx.next_state(action_prev)


def unroll(decoder: RecurrentDecoder, graph_repr, actions) -> list:
    """Replay a full action sequence: states conditioned on (0, a_1..a_{T-1})."""
    ctx = decoder.init_sequence(graph_repr, len(actions))
    states = [ctx.next_state(0.0)]
    for a in actions[:-1]:
        states.append(ctx.next_state(a))
    return states

"""Graph encoders: typed-edge GCN with mean pooling, differentiable pooling,
and a semi-supervised node-labeling probe.

Message passing respects edge types and direction: each layer sums, per edge
type, symmetric-degree-normalized messages from in-neighbors transformed by a
type-specific weight, plus a degree-scaled self term.  The whole-graph
representation is either the node-embedding mean or the single-cluster output
of a stack of learned soft-pooling levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .hgraph import FlatGraph


class ConfigError(ValueError):
    pass


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# Propagation structure
# ---------------------------------------------------------------------------

def propagation_matrices(graph: FlatGraph):
    """Per-edge-type normalized adjacency plus the self-loop scale.

    For an edge u -> v the message coefficient is 1/sqrt(deg(u) * deg(v)),
    with deg counting all incident edges plus one self loop; the self term is
    scaled by 1/deg(v).  Returns ({type: (N, N) matrix}, (N, 1) self scale).
    """
    n = graph.num_nodes
    deg = np.ones(n)
    for src, dst, _ in graph.edges:
        deg[src] += 1.0
        deg[dst] += 1.0
    mats = {}
    for src, dst, etype in graph.edges:
        mat = mats.get(etype)
        if mat is None:
            mat = mats[etype] = np.zeros((n, n))
        mat[dst, src] += 1.0 / math.sqrt(deg[src] * deg[dst])
    return mats, (1.0 / deg)[:, None]


def collapsed_adjacency(graph: FlatGraph) -> np.ndarray:
    """Type-summed, symmetrized, self-looped, symmetric-normalized adjacency."""
    n = graph.num_nodes
    a = np.zeros((n, n))
    for src, dst, _ in graph.edges:
        a[src, dst] += 1.0
        a[dst, src] += 1.0
    a += np.eye(n)
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


# ---------------------------------------------------------------------------
# Typed-edge GCN
# ---------------------------------------------------------------------------

class GcnStack:
    """Multi-layer GCN with one weight per edge type per layer."""

    def __init__(self, in_dim, dim, edge_types, depth=2, rng=None, name="gcn"):
        if depth < 1:
            raise ConfigError("gcn depth must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.dim, self.depth = in_dim, dim, depth
        self.edge_types = tuple(edge_types)
        self.params = {}
        for layer in range(depth):
            fan_in = in_dim if layer == 0 else dim
            self.params[f"{name}.{layer}.self"] = ad.param(
                _glorot(rng, fan_in, dim), name=f"{name}.{layer}.self")
            self.params[f"{name}.{layer}.bias"] = ad.param(
                np.zeros(dim), name=f"{name}.{layer}.bias")
            for etype in self.edge_types:
                key = f"{name}.{layer}.{etype}"
                self.params[key] = ad.param(_glorot(rng, fan_in, dim), name=key)
        self._name = name

    def parameters(self):
        return self.params

    def trainable_for(self, graph: FlatGraph):
        """Parameters that participate in a forward pass over ``graph``.

        Weights for edge types absent from the graph receive no gradient
        (their contribution is structurally zero), so optimizers get the
        filtered map.
        """
        present = {etype for _, _, etype in graph.edges}
        keep = {}
        for key, p in self.params.items():
            tail = key.rsplit(".", 1)[1]
            if tail in ("self", "bias") or tail in present:
                keep[key] = p
        return keep

    def forward(self, graph: FlatGraph) -> ad.Tensor:
        """Node embeddings (N x dim)."""
        if graph.features is None:
            raise ConfigError("graph has no node features; call init_node_features")
        if graph.features.shape[1] != self.in_dim:
            raise ad.ShapeError(
                f"gcn: feature width {graph.features.shape[1]} != stack input "
                f"width {self.in_dim}")
        mats, self_scale = propagation_matrices(graph)
        consts = {etype: ad.tensor(mat) for etype, mat in mats.items()}
        scale = ad.tensor(self_scale)
        x = ad.tensor(graph.features)
        for layer in range(self.depth):
            acc = ad.mul(ad.matmul(x, self.params[f"{self._name}.{layer}.self"]), scale)
            for etype, mat in consts.items():
                msg = ad.matmul(mat, ad.matmul(x, self.params[f"{self._name}.{layer}.{etype}"]))
                acc = ad.add(acc, msg)
            x = ad.tanh(ad.add(acc, self.params[f"{self._name}.{layer}.bias"]))
        return x


def gcn_forward(stack: GcnStack, graph: FlatGraph) -> ad.Tensor:
    return stack.forward(graph)


def mean_pool(node_embeddings: ad.Tensor) -> ad.Tensor:
    """Whole-graph representation: column mean of the node embeddings."""
    if node_embeddings.size == 0 or node_embeddings.shape[0] == 0:
        raise ad.ShapeError("mean_pool: empty graph")
    return ad.mean(node_embeddings, axis=0)


# ---------------------------------------------------------------------------
# Differentiable pooling
# ---------------------------------------------------------------------------

class _DenseGcnLayer:
    """Plain GCN layer over a dense (possibly learned) adjacency."""

    def __init__(self, in_dim, out_dim, rng, name, activation="tanh"):
        self.weight = ad.param(_glorot(rng, in_dim, out_dim), name=f"{name}.w")
        self.self_weight = ad.param(_glorot(rng, in_dim, out_dim), name=f"{name}.ws")
        self.bias = ad.param(np.zeros(out_dim), name=f"{name}.b")
        self.activation = activation

    def forward(self, adj, x):
        out = ad.add(ad.add(ad.matmul(adj, ad.matmul(x, self.weight)),
                            ad.matmul(x, self.self_weight)), self.bias)
        return ad.tanh(out) if self.activation == "tanh" else out

    def parameters(self):
        return {self.weight.name: self.weight, self.self_weight.name: self.self_weight,
                self.bias.name: self.bias}


class DiffPoolStack:
    """Stack of soft-pooling levels coarsening the graph down to one cluster.

    Per level: embeddings from an embed GCN, a row-stochastic assignment from
    a pool GCN under row softmax, then features and adjacency are projected
    through the assignment.  The final level has exactly one cluster, so the
    output is a single d-dimensional representation.
    """

    def __init__(self, in_dim, dim, cluster_schedule, rng=None, embed_depth=2,
                 name="diffpool"):
        rng = rng or np.random.default_rng(0)
        schedule = list(cluster_schedule)
        if not schedule or schedule[-1] != 1:
            raise ConfigError(f"cluster schedule must end at 1, got {schedule}")
        if any(a <= b for a, b in zip(schedule, schedule[1:])):
            raise ConfigError(f"cluster schedule must be strictly decreasing, got {schedule}")
        self.in_dim, self.dim, self.schedule = in_dim, dim, schedule
        self.levels = []
        self.params = {}
        for li, clusters in enumerate(schedule):
            embed = []
            for d in range(embed_depth):
                fan_in = in_dim if (li == 0 and d == 0) else dim
                layer = _DenseGcnLayer(fan_in, dim, rng, f"{name}.{li}.embed{d}")
                embed.append(layer)
                self.params.update(layer.parameters())
            pool_in = in_dim if li == 0 else dim
            pool = _DenseGcnLayer(pool_in, clusters, rng, f"{name}.{li}.pool",
                                  activation="linear")
            self.params.update(pool.parameters())
            self.levels.append((embed, pool))

    def parameters(self):
        return self.params

    def forward(self, graph: FlatGraph, return_trace=False):
        if graph.features is None:
            raise ConfigError("graph has no node features; call init_node_features")
        if graph.features.shape[1] != self.in_dim:
            raise ad.ShapeError(
                f"diffpool: feature width {graph.features.shape[1]} != stack "
                f"input width {self.in_dim}")
        adj = ad.tensor(collapsed_adjacency(graph))
        x = ad.tensor(graph.features)
        trace = []
        for embed, pool in self.levels:
            z = x
            for layer in embed:
                z = layer.forward(adj, z)
            assign = ad.softmax_rows(pool.forward(adj, x))
            assign_t = ad.transpose(assign)
            x = ad.matmul(assign_t, z)
            adj = ad.matmul(ad.matmul(assign_t, adj), assign)
            if return_trace:
                trace.append({"assignment": assign.data.copy(),
                              "adjacency": adj.data.copy(),
                              "features": x.data.copy()})
        rep = ad.reshape(x, (self.dim,))
        return (rep, trace) if return_trace else rep


def diffpool_forward(stack: DiffPoolStack, graph: FlatGraph, return_trace=False):
    return stack.forward(graph, return_trace=return_trace)


def default_schedule(num_nodes: int) -> list:
    """[ceil(N/4), 1], degenerating to [1] on tiny graphs."""
    mid = math.ceil(num_nodes / 4)
    return [mid, 1] if mid > 1 else [1]


# ---------------------------------------------------------------------------
# Whole-graph encoder facade
# ---------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    kind: str = "mean_pool"        # "mean_pool" (chain-like nets) or "diffpool"
    dim: int = 32
    depth: int = 2


class GraphEncoder:
    """Selects pooling strategy and exposes a single forward() -> vector."""

    def __init__(self, graph: FlatGraph, config: EncoderConfig | None = None, rng=None):
        self.config = config or EncoderConfig()
        self.graph = graph
        if self.config.kind == "mean_pool":
            self.stack = GcnStack(graph.features.shape[1], self.config.dim,
                                  graph.edge_types, depth=self.config.depth, rng=rng)
        elif self.config.kind == "diffpool":
            self.stack = DiffPoolStack(graph.features.shape[1], self.config.dim,
                                       default_schedule(graph.num_nodes), rng=rng,
                                       embed_depth=self.config.depth)
        else:
            raise ConfigError(f"unknown encoder kind {self.config.kind!r}")

    def parameters(self):
        return self.stack.parameters()

    def trainable(self):
        if isinstance(self.stack, GcnStack):
            return self.stack.trainable_for(self.graph)
        return self.stack.parameters()

    def forward(self) -> ad.Tensor:
        if isinstance(self.stack, GcnStack):
            return mean_pool(self.stack.forward(self.graph))
        return self.stack.forward(self.graph)


# ---------------------------------------------------------------------------
# Node-labeling probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    predictions: np.ndarray
    heldout_empty: bool


def node_classify(stack: GcnStack, graph: FlatGraph, labels, label_fraction=0.2,
                  rng=None, epochs=200, lr=0.02) -> ProbeResult:
    """Semi-supervised node classification on layer-of-origin labels.

    Trains a softmax head (jointly with the GCN stack) on a stratified
    ``label_fraction`` of nodes and reports accuracy on the held-out rest.
    Every class must appear in the labeled set.
    """
    rng = rng or np.random.default_rng(0)
    labels = np.asarray(labels, dtype=int)
    if labels.shape[0] != graph.num_nodes:
        raise ad.ShapeError(f"labels length {labels.shape[0]} != {graph.num_nodes} nodes")
    classes = np.unique(labels)
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[c] for c in labels])

    # stratified pick: at least one node per class, then fill to the fraction
    n_train = max(int(round(label_fraction * graph.num_nodes)), len(classes))
    n_train = min(n_train, graph.num_nodes)
    picks = []
    for c in range(len(classes)):
        members = np.flatnonzero(y == c)
        picks.append(rng.choice(members))
    picks = set(int(i) for i in picks)
    order = rng.permutation(graph.num_nodes)
    for i in order:
        if len(picks) >= n_train:
            break
        picks.add(int(i))
    train_idx = np.array(sorted(picks))
    test_idx = np.array([i for i in range(graph.num_nodes) if i not in picks])

    missing = set(range(len(classes))) - set(y[train_idx])
    if missing:
        raise ConfigError(f"classes absent from the labeled set: "
                          f"{sorted(classes[i] for i in missing)}")

    head_w = ad.param(_glorot(rng, stack.dim, len(classes)), name="probe.w")
    head_b = ad.param(np.zeros(len(classes)), name="probe.b")
    params = dict(stack.trainable_for(graph))
    params.update({"probe.w": head_w, "probe.b": head_b})
    opt = ad.Adam(params, lr=lr)

    onehot = np.zeros((len(train_idx), len(classes)))
    onehot[np.arange(len(train_idx)), y[train_idx]] = 1.0
    select = np.zeros((len(train_idx), graph.num_nodes))
    select[np.arange(len(train_idx)), train_idx] = 1.0
    select_t = ad.tensor(select)
    target = ad.tensor(onehot)

    def logits_all():
        return ad.add(ad.matmul(stack.forward(graph), head_w), head_b)

    for _ in range(epochs):
        logits = ad.matmul(select_t, logits_all())
        logp = ad.log(ad.softmax_rows(logits))
        loss = ad.neg(ad.mean(ad.sum_(ad.mul(logp, target), axis=1)))
        ad.backward(loss)
        opt.step()

    with ad.no_grad():
        pred = logits_all().data.argmax(axis=1)
    train_acc = float((pred[train_idx] == y[train_idx]).mean())
    if len(test_idx):
        acc = float((pred[test_idx] == y[test_idx]).mean())
        empty = False
    else:
        acc = train_acc
        empty = True
    return ProbeResult(accuracy=acc, train_accuracy=train_acc,
                       predictions=classes[pred], heldout_empty=empty)

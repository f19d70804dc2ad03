"""Model descriptions and their hierarchical / flattened computation graphs.

A network is declared as an ordered list of layer records (JSON).  From it we
build a two-level computation graph: level-1 graphs are compound-op motifs
(one per distinct declared block pattern), the level-2 graph has one typed
edge per block instance.  Flattening substitutes each motif edge with a copy
of its level-1 graph, yielding a single-level typed-edge DAG whose nodes are
feature-map states labeled by the model layer that produced them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Edge-type vocabulary: eleven primitive ops.  Dense layers map onto conv1
# (a 1x1 conv on 1x1 spatial input is exactly a dense layer).
DEFAULT_PRIMITIVE_OPS = (
    "conv1", "conv3", "conv7", "relu", "batchnorm",
    "maxpool2", "maxpool3", "avgpool2", "avgpool3",
    "padding", "splitting",
)

LAYER_KINDS = ("conv", "linear", "relu", "batchnorm", "maxpool", "avgpool", "pad", "join")

INPUT_STATE = "input"
INPUT_ORIGIN = 0  # layer-of-origin label for the network-input node


class ParseError(ValueError):
    """Model description does not parse or fails shape validation."""


class GraphError(ValueError):
    """Graph construction failure (unmappable kind, bad hierarchy config)."""


@dataclass
class PrimitiveOpSet:
    """Ordered edge-type vocabulary."""

    types: tuple = DEFAULT_PRIMITIVE_OPS

    def __post_init__(self):
        if len(set(self.types)) != len(self.types):
            raise GraphError("primitive op types must be unique")

    def index(self, name):
        return self.types.index(name)

    def __contains__(self, name):
        return name in self.types

    def __len__(self):
        return len(self.types)


@dataclass
class LayerRec:
    """One validated layer record with propagated shapes."""

    index: int                   # 1-based position in the model
    id: str
    kind: str
    k: int = 0
    stride: int = 1
    pad: int = 0
    in_channels: int = 0
    out_channels: int = 0
    in_h: int = 0
    in_w: int = 0
    out_h: int = 0
    out_w: int = 0
    in_features: int = 0         # linear only
    out_features: int = 0
    after: str | None = None     # id of the state this layer consumes
    join_from: str | None = None # shortcut source (join records)
    join_of: tuple = ()          # branch tips merged by this join record
    block: str | None = None     # block-instance label

    @property
    def has_params(self):
        return self.kind in ("conv", "linear", "batchnorm")

    @property
    def out_width(self):
        """Channel count of the state this layer produces."""
        return self.out_features if self.kind == "linear" else self.out_channels


@dataclass
class ModelDesc:
    name: str
    in_channels: int
    in_h: int
    in_w: int
    layers: list = field(default_factory=list)

    def layer(self, layer_id) -> LayerRec:
        for rec in self.layers:
            if rec.id == layer_id:
                return rec
        raise KeyError(layer_id)

    @property
    def num_layers(self):
        return len(self.layers)


def _edge_type(rec: LayerRec) -> str:
    """Primitive edge type for a layer record."""
    if rec.kind == "conv":
        return f"conv{rec.k}"
    if rec.kind == "linear":
        return "conv1"
    if rec.kind == "relu":
        return "relu"
    if rec.kind == "batchnorm":
        return "batchnorm"
    if rec.kind == "maxpool":
        return f"maxpool{rec.k}"
    if rec.kind == "avgpool":
        return f"avgpool{rec.k}"
    if rec.kind == "pad":
        return "padding"
    raise GraphError(f"no primitive op for layer kind {rec.kind!r}")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _fail(i, layer_id, msg):
    where = f"layers[{i}]" + (f" ({layer_id})" if layer_id else "")
    raise ParseError(f"{where}: {msg}")


def parse_model(text: str) -> ModelDesc:
    """Parse and validate a JSON model description.

    Expected form::

        {"name": "...", "input": {"channels": 3, "height": 8, "width": 8},
         "layers": [{"id": "c1", "kind": "conv", "k": 3, "stride": 1,
                     "pad": 1, "out": 8, "block": "b1", ...}, ...]}

    Each record may name its input state with "after" (default: previous
    record).  "join" records either merge branch tips ("of": [ids]) or add a
    shortcut edge from an earlier state ("from": id).  Shapes are propagated
    and checked; errors carry the failing record index and field.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict) or "layers" not in doc or "input" not in doc:
        raise ParseError("model document must have 'input' and 'layers' fields")
    inp = doc["input"]
    try:
        c, h, w = int(inp["channels"]), int(inp["height"]), int(inp["width"])
    except (KeyError, TypeError, ValueError):
        raise ParseError("input: need integer 'channels', 'height', 'width'") from None
    if min(c, h, w) < 1:
        raise ParseError("input: dimensions must be positive")

    desc = ModelDesc(name=str(doc.get("name", "model")), in_channels=c, in_h=h, in_w=w)
    shapes = {INPUT_STATE: (c, h, w)}  # state id -> (channels, h, w)
    seen = set()

    for i, raw in enumerate(doc["layers"]):
        if not isinstance(raw, dict):
            _fail(i, None, "layer record must be an object")
        layer_id = str(raw.get("id", f"layer{i + 1}"))
        if layer_id in seen or layer_id == INPUT_STATE:
            _fail(i, layer_id, "duplicate or reserved layer id")
        kind = raw.get("kind")
        if kind not in LAYER_KINDS:
            _fail(i, layer_id, f"unknown layer kind {kind!r}")

        after = raw.get("after")
        if after is None:
            after = desc.layers[-1].id if desc.layers else INPUT_STATE
        if after not in shapes:
            _fail(i, layer_id, f"field 'after': unknown state {after!r}")
        ic, ih, iw = shapes[after]

        rec = LayerRec(index=i + 1, id=layer_id, kind=kind, after=after,
                       in_channels=ic, in_h=ih, in_w=iw,
                       block=raw.get("block"))

        if kind == "conv":
            try:
                rec.k = int(raw["k"])
                rec.out_channels = int(raw["out"])
            except (KeyError, TypeError, ValueError):
                _fail(i, layer_id, "conv needs integer 'k' and 'out'")
            rec.stride = int(raw.get("stride", 1))
            rec.pad = int(raw.get("pad", 0))
            if rec.k not in (1, 3, 7):
                _fail(i, layer_id, f"conv kernel k={rec.k} not in (1, 3, 7)")
            if rec.stride not in (1, 2):
                _fail(i, layer_id, f"conv stride {rec.stride} not in (1, 2)")
            oh = (ih + 2 * rec.pad - rec.k) // rec.stride + 1
            ow = (iw + 2 * rec.pad - rec.k) // rec.stride + 1
            if oh < 1 or ow < 1:
                _fail(i, layer_id, f"conv kernel {rec.k} too large for input {ih}x{iw}")
            rec.out_h, rec.out_w = oh, ow
        elif kind == "linear":
            try:
                rec.out_features = int(raw["out"])
            except (KeyError, TypeError, ValueError):
                _fail(i, layer_id, "linear needs integer 'out'")
            rec.in_features = ic * ih * iw
            rec.out_channels = rec.out_features
            rec.out_h = rec.out_w = 1
        elif kind in ("maxpool", "avgpool"):
            rec.k = int(raw.get("k", 2))
            rec.stride = int(raw.get("stride", rec.k))
            if rec.k not in (2, 3):
                _fail(i, layer_id, f"pool kernel k={rec.k} not in (2, 3)")
            oh = (ih - rec.k) // rec.stride + 1
            ow = (iw - rec.k) // rec.stride + 1
            if oh < 1 or ow < 1:
                _fail(i, layer_id, f"pool window {rec.k} too large for input {ih}x{iw}")
            rec.out_channels, rec.out_h, rec.out_w = ic, oh, ow
        elif kind == "pad":
            rec.pad = int(raw.get("pad", 1))
            rec.out_channels, rec.out_h, rec.out_w = ic, ih + 2 * rec.pad, iw + 2 * rec.pad
        elif kind == "join":
            of = tuple(raw.get("of", ()))
            join_from = raw.get("from")
            if not of and join_from is None:
                _fail(i, layer_id, "join needs 'of' (branch tips) or 'from' (shortcut)")
            for ref in of + ((join_from,) if join_from else ()):
                if ref not in shapes:
                    _fail(i, layer_id, f"dangling shortcut reference {ref!r}")
                if shapes[ref] != (ic, ih, iw):
                    _fail(i, layer_id,
                          f"shortcut source {ref!r} shape {shapes[ref]} != {(ic, ih, iw)}")
            rec.join_of = of
            rec.join_from = join_from
            rec.out_channels, rec.out_h, rec.out_w = ic, ih, iw
        else:  # relu, batchnorm
            rec.out_channels, rec.out_h, rec.out_w = ic, ih, iw

        desc.layers.append(rec)
        shapes[layer_id] = (rec.out_channels, rec.out_h, rec.out_w)
        seen.add(layer_id)

    if not desc.layers:
        raise ParseError("model has no layers")
    return desc


def load_model(path) -> ModelDesc:
    with open(path) as fh:
        return parse_model(fh.read())


# ---------------------------------------------------------------------------
# Graph containers
# ---------------------------------------------------------------------------

@dataclass
class LevelGraph:
    """Single-level directed typed graph with one source and one sink."""

    num_nodes: int
    edges: list                      # (src, dst, type) in construction order
    source: int
    sink: int
    node_origin: list                # per node: producing model-layer index


@dataclass
class Motif:
    """Level-1 compound op: the internal graph of one block pattern."""

    name: str
    graph: LevelGraph                # node_origin holds offsets into the block
    signature: tuple


@dataclass
class HierGraph:
    levels: int
    ops: PrimitiveOpSet
    motifs: dict                     # name -> Motif
    top: LevelGraph                  # edge types: motif names or primitive ops
    model: ModelDesc
    # top edge position -> global index of the block's first record,
    # for motif edges only (drives layer-of-origin labels when flattening)
    motif_edge_start: dict = field(default_factory=dict)


@dataclass
class FlatGraph:
    """Flattened typed-edge graph ready for encoding."""

    num_nodes: int
    edges: list                      # (src, dst, type)
    layer_of_origin: list            # per node; 0 denotes the network input
    edge_types: tuple
    source: int | None
    sink: int | None
    features: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

class _GraphBuilder:
    """Accumulates states/edges with join-merging via node aliasing."""

    def __init__(self):
        self.node_of = {}            # state id -> node index (pre-alias)
        self.alias = []              # union-find parent per node
        self.origin = []             # producing layer index per node
        self.edges = []              # (src_node, dst_node, type), pre-alias

    def add_state(self, state_id, origin):
        idx = len(self.alias)
        self.alias.append(idx)
        self.origin.append(origin)
        self.node_of[state_id] = idx
        return idx

    def find(self, idx):
        while self.alias[idx] != idx:
            self.alias[idx] = self.alias[self.alias[idx]]
            idx = self.alias[idx]
        return idx

    def merge(self, keep, other):
        self.alias[self.find(other)] = self.find(keep)

    def add_edge(self, src_state, dst_state, etype):
        self.edges.append((self.node_of[src_state], self.node_of[dst_state], etype))

    def finish(self, source_state, sink_state):
        """Renumber to contiguous ids in first-appearance order."""
        remap = {}
        origin = []
        order = []
        for idx in range(len(self.alias)):
            root = self.find(idx)
            if root not in remap:
                remap[root] = len(order)
                order.append(root)
                origin.append(self.origin[root])
        edges = [(remap[self.find(s)], remap[self.find(d)], t) for s, d, t in self.edges]
        src = remap[self.find(self.node_of[source_state])]
        sink = remap[self.find(self.node_of[sink_state])]
        return LevelGraph(num_nodes=len(order), edges=edges, source=src,
                          sink=sink, node_origin=origin)


def _build_record_graph(records, input_state, origin_of):
    """Record-level graph over a list of layer records.

    ``origin_of(rec)`` gives the origin label for the state a record produces.
    Join records merge branch tips ('of') and/or add a splitting edge ('from').
    """
    b = _GraphBuilder()
    b.add_state(input_state, INPUT_ORIGIN if input_state == INPUT_STATE else None)
    last_state = input_state
    for rec in records:
        if rec.kind == "join":
            targets = list(rec.join_of)
            if targets:
                keep = b.node_of[targets[0]]
                for other in targets[1:]:
                    b.merge(keep, b.node_of[other])
                b.node_of[rec.id] = keep
                b.origin[b.find(keep)] = origin_of(rec)
            else:
                b.node_of[rec.id] = b.node_of[rec.after]
                b.origin[b.find(b.node_of[rec.id])] = origin_of(rec)
            if rec.join_from is not None:
                b.edges.append((b.node_of[rec.join_from], b.node_of[rec.id], "splitting"))
        else:
            b.add_state(rec.id, origin_of(rec))
            b.add_edge(rec.after, rec.id, _edge_type(rec))
        last_state = rec.id
    return b, last_state


def _block_instances(desc: ModelDesc):
    """Split layers into (block_label_or_None, [records]) runs."""
    runs = []
    for rec in desc.layers:
        if runs and rec.block is not None and rec.block == runs[-1][0]:
            runs[-1][1].append(rec)
        else:
            runs.append([rec.block, [rec]])
    return runs


def _motif_signature(records):
    """Structural identity of a block: types plus internal topology."""
    pos = {INPUT_STATE: 0}
    sig = []
    for offset, rec in enumerate(records, start=1):
        pos[rec.id] = offset
        after = pos[rec.after]
        if rec.kind == "join":
            sig.append(("join", after,
                        tuple(pos[s] for s in rec.join_of),
                        pos[rec.join_from] if rec.join_from else None))
        else:
            sig.append((_edge_type(rec), after))
    return tuple(sig)


def build_hier_graph(desc: ModelDesc, ops: PrimitiveOpSet | None = None,
                     levels: int = 2) -> HierGraph:
    """Construct the leveled computation graph for a model description.

    With ``levels=2``, consecutive records sharing a "block" label become one
    level-2 edge typed by their block pattern (motif); unlabeled records stay
    primitive edges.  With ``levels=1`` every record maps to a primitive edge
    and no motifs are formed.
    """
    ops = ops or PrimitiveOpSet()
    if levels not in (1, 2):
        raise GraphError(f"unsupported hierarchy depth {levels}; expected 1 or 2")
    for rec in desc.layers:
        if rec.kind != "join" and _edge_type(rec) not in ops:
            raise GraphError(f"layer kind {rec.kind!r} maps to edge type "
                             f"{_edge_type(rec)!r}, not in the primitive op set")

    if levels == 1:
        b, last = _build_record_graph(desc.layers, INPUT_STATE, lambda r: r.index)
        top = b.finish(INPUT_STATE, last)
        return HierGraph(levels=1, ops=ops, motifs={}, top=top, model=desc)

    motifs = {}
    sig_to_name = {}
    motif_edge_start = {}
    b = _GraphBuilder()
    b.add_state(INPUT_STATE, INPUT_ORIGIN)
    last_state = INPUT_STATE
    for label, records in _block_instances(desc):
        if label is None or (len(records) == 1 and records[0].kind != "join"):
            # singleton layers stay primitive (or splitting) edges at level 2
            for rec in records:
                if rec.kind == "join":
                    try:
                        targets = [b.node_of[s] for s in rec.join_of]
                        src_node = (b.node_of[rec.join_from]
                                    if rec.join_from is not None else None)
                        after_node = b.node_of[rec.after]
                    except KeyError as exc:
                        raise GraphError(
                            f"join {rec.id!r} references state {exc.args[0]!r} "
                            f"buried inside a block; joins across blocks may only "
                            f"reference block boundaries") from None
                    if targets:
                        keep = targets[0]
                        for other in targets[1:]:
                            b.merge(keep, other)
                        b.node_of[rec.id] = keep
                        b.origin[b.find(keep)] = rec.index
                    else:
                        b.node_of[rec.id] = after_node
                        b.origin[b.find(after_node)] = rec.index
                    if src_node is not None:
                        b.edges.append((src_node, b.node_of[rec.id], "splitting"))
                else:
                    b.add_state(rec.id, rec.index)
                    b.add_edge(rec.after, rec.id, _edge_type(rec))
                last_state = rec.id
        else:
            entry = records[0].after
            ids_inside = {r.id for r in records}
            for rec in records:
                refs = [rec.after] + list(rec.join_of) + (
                    [rec.join_from] if rec.join_from else [])
                for ref in refs:
                    if ref not in ids_inside and ref != entry:
                        raise GraphError(
                            f"block {label!r}: record {rec.id!r} references state "
                            f"{ref!r} outside the block")
            relabeled = _relabel_block(records, entry)
            sig = _motif_signature(relabeled)
            if sig not in sig_to_name:
                name = f"motif{len(sig_to_name)}"
                mb, mlast = _build_record_graph(relabeled, INPUT_STATE,
                                                lambda r: r.index)
                motifs[name] = Motif(name=name, graph=mb.finish(INPUT_STATE, mlast),
                                     signature=sig)
                sig_to_name[sig] = name
            name = sig_to_name[sig]
            motif_edge_start[len(b.edges)] = records[0].index
            b.add_state(records[-1].id, records[-1].index)
            b.add_edge(entry, records[-1].id, name)
            last_state = records[-1].id

    top = b.finish(INPUT_STATE, last_state)
    return HierGraph(levels=2, ops=ops, motifs=motifs, top=top, model=desc,
                     motif_edge_start=motif_edge_start)


def _relabel_block(records, entry):
    """Copies of block records with the entry state renamed to the input and
    1-based block positions as indices (motif-local origin labels)."""
    out = []
    rename = {entry: INPUT_STATE}
    for offset, rec in enumerate(records, start=1):
        clone = LayerRec(
            index=offset, id=rec.id, kind=rec.kind, k=rec.k, stride=rec.stride,
            pad=rec.pad, after=rename.get(rec.after, rec.after),
            join_from=(rename.get(rec.join_from, rec.join_from)
                       if rec.join_from is not None else None),
            join_of=tuple(rename.get(s, s) for s in rec.join_of),
            block=rec.block)
        out.append(clone)
    return out


def flatten(h: HierGraph) -> FlatGraph:
    """Substitute each motif edge with a copy of its level-1 graph."""
    origin = list(h.top.node_origin)
    edges = []
    next_node = h.top.num_nodes
    for edge_i, (src, dst, etype) in enumerate(h.top.edges):
        if etype not in h.motifs:
            edges.append((src, dst, etype))
            continue
        m = h.motifs[etype].graph
        start_index = h.motif_edge_start[edge_i]
        node_map = {m.source: src, m.sink: dst}
        for local in range(m.num_nodes):
            if local in (m.source, m.sink):
                continue
            node_map[local] = next_node
            # origin offsets inside the motif are 1-based block positions
            origin.append(start_index + m.node_origin[local] - 1)
            next_node += 1
        for ms, md, mt in m.edges:
            edges.append((node_map[ms], node_map[md], mt))
    return FlatGraph(num_nodes=next_node, edges=edges, layer_of_origin=origin,
                     edge_types=h.ops.types, source=h.top.source, sink=h.top.sink)


def level_sources_sinks(g: LevelGraph):
    """(zero-in-degree nodes, zero-out-degree nodes) of a level graph."""
    indeg = [0] * g.num_nodes
    outdeg = [0] * g.num_nodes
    for s, d, _ in g.edges:
        outdeg[s] += 1
        indeg[d] += 1
    sources = [i for i in range(g.num_nodes) if indeg[i] == 0]
    sinks = [i for i in range(g.num_nodes) if outdeg[i] == 0]
    return sources, sinks


# ---------------------------------------------------------------------------
# Channel expansion (probe graphs)
# ---------------------------------------------------------------------------

def expand_channels(flat: FlatGraph, desc: ModelDesc) -> FlatGraph:
    """One node per channel per feature-map state.

    conv/linear edges become complete bipartite between the incident states'
    channels (every output channel reads every input channel); pointwise and
    pooling edges connect channels one to one.  Used by the node-labeling
    probe, where each layer needs a population of nodes; the compact graph
    remains the default for policy search.  The result is multi-source.
    """
    width = []
    for node in range(flat.num_nodes):
        org = flat.layer_of_origin[node]
        width.append(desc.in_channels if org == INPUT_ORIGIN
                     else desc.layers[org - 1].out_width)
    starts = np.concatenate([[0], np.cumsum(width)]).astype(int)
    origin = []
    for node in range(flat.num_nodes):
        origin.extend([flat.layer_of_origin[node]] * width[node])
    edges = []
    dense = {"conv1", "conv3", "conv7"}
    for src, dst, etype in flat.edges:
        if etype in dense:
            for i in range(width[src]):
                for j in range(width[dst]):
                    edges.append((starts[src] + i, starts[dst] + j, etype))
        else:
            if width[src] != width[dst]:
                raise GraphError(f"edge type {etype!r} with unequal widths "
                                 f"{width[src]} != {width[dst]}")
            for i in range(width[src]):
                edges.append((starts[src] + i, starts[dst] + i, etype))
    return FlatGraph(num_nodes=int(starts[-1]), edges=edges,
                     layer_of_origin=origin, edge_types=flat.edge_types,
                     source=None, sink=None)


# ---------------------------------------------------------------------------
# Node features and export
# ---------------------------------------------------------------------------

def init_node_features(flat: FlatGraph) -> FlatGraph:
    """Structural features: [in-hist | out-hist | in-degree | out-degree].

    Histograms count incident edges per type; degrees are normalized by the
    graph maximum.  Width is 2 * |op set| + 2.
    """
    n = flat.num_nodes
    t = len(flat.edge_types)
    type_idx = {name: i for i, name in enumerate(flat.edge_types)}
    feats = np.zeros((n, 2 * t + 2))
    for src, dst, etype in flat.edges:
        if etype not in type_idx:
            raise GraphError(f"edge type {etype!r} not in the op set")
        feats[dst, type_idx[etype]] += 1.0          # in histogram
        feats[src, t + type_idx[etype]] += 1.0      # out histogram
    in_deg = feats[:, :t].sum(axis=1)
    out_deg = feats[:, t:2 * t].sum(axis=1)
    feats[:, 2 * t] = in_deg / max(in_deg.max(), 1.0)
    feats[:, 2 * t + 1] = out_deg / max(out_deg.max(), 1.0)
    flat.features = feats
    return flat


def graph_to_json(flat: FlatGraph) -> str:
    """Stable JSON export: nodes with origins/features, typed edges."""
    nodes = []
    for i in range(flat.num_nodes):
        node = {"id": i, "layer_of_origin": flat.layer_of_origin[i]}
        if flat.features is not None:
            node["features"] = flat.features[i].tolist()
        nodes.append(node)
    doc = {
        "edge_types": list(flat.edge_types),
        "nodes": nodes,
        "edges": [{"src": s, "dst": d, "type": t} for s, d, t in flat.edges],
        "source": flat.source,
        "sink": flat.sink,
    }
    return json.dumps(doc, indent=1)


def is_dag(flat: FlatGraph) -> bool:
    """Kahn's algorithm; joins appear as converging edges, never cycles."""
    indeg = [0] * flat.num_nodes
    adj = [[] for _ in range(flat.num_nodes)]
    for s, d, _ in flat.edges:
        indeg[d] += 1
        adj[s].append(d)
    queue = [i for i, d in enumerate(indeg) if d == 0]
    seen = 0
    while queue:
        node = queue.pop()
        seen += 1
        for nxt in adj[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    return seen == flat.num_nodes


def build_flat_graph(desc: ModelDesc, ops: PrimitiveOpSet | None = None,
                     levels: int = 2, expand: bool = False) -> FlatGraph:
    """Parse-to-features convenience: build, flatten, optionally expand."""
    flat = flatten(build_hier_graph(desc, ops=ops, levels=levels))
    if expand:
        flat = expand_channels(flat, desc)
    return init_node_features(flat)

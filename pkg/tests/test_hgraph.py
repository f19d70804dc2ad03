import json

import numpy as np
import pytest

from graphprune import hgraph, zoo
from graphprune.hgraph import (
    FlatGraph, GraphError, ParseError, PrimitiveOpSet, build_flat_graph,
    build_hier_graph, expand_channels, flatten, init_node_features, is_dag,
    level_sources_sinks, parse_model,
)


def test_parse_two_layer_model():
    text = json.dumps({
        "input": {"channels": 3, "height": 8, "width": 8},
        "layers": [
            {"id": "c", "kind": "conv", "k": 3, "out": 8},
            {"id": "fc", "kind": "linear", "out": 10},
        ],
    })
    desc = parse_model(text)
    assert desc.num_layers == 2
    assert desc.layers[0].out_channels == 8
    assert desc.layers[0].out_h == 6  # 8 - 3 + 1
    assert desc.layers[1].in_features == 8 * 6 * 6
    assert desc.layers[1].out_features == 10


def test_parse_resnet_block_records_shortcut():
    desc = parse_model(zoo.to_text(zoo.toy_resnet(num_blocks=1, identity_shortcuts=True)))
    joins = [rec for rec in desc.layers if rec.kind == "join"]
    assert len(joins) == 1
    assert joins[0].join_from == "stem_r"


def test_parse_channel_mismatch_is_error():
    text = json.dumps({
        "input": {"channels": 3, "height": 8, "width": 8},
        "layers": [
            {"id": "c1", "kind": "conv", "k": 3, "pad": 1, "out": 8},
            {"id": "j", "kind": "join", "from": "input"},  # 8 vs 3 channels
        ],
    })
    with pytest.raises(ParseError, match="shape"):
        parse_model(text)


def test_parse_dangling_shortcut_is_error():
    text = json.dumps({
        "input": {"channels": 3, "height": 8, "width": 8},
        "layers": [
            {"id": "c1", "kind": "conv", "k": 3, "pad": 1, "out": 3},
            {"id": "j", "kind": "join", "from": "nope"},
        ],
    })
    with pytest.raises(ParseError, match="dangling"):
        parse_model(text)


def test_parse_unknown_kind_is_error():
    text = json.dumps({
        "input": {"channels": 3, "height": 8, "width": 8},
        "layers": [{"id": "x", "kind": "deconv", "k": 3, "out": 4}],
    })
    with pytest.raises(ParseError, match="deconv"):
        parse_model(text)


def test_branch_block_motif_has_four_edges_one_source_one_sink():
    desc = parse_model(zoo.to_text(zoo.branch_block()))
    h = build_hier_graph(desc)
    assert len(h.motifs) == 1
    motif = next(iter(h.motifs.values())).graph
    types = sorted(t for _, _, t in motif.edges)
    assert types == ["conv1", "conv1", "conv3", "conv3"]
    sources, sinks = level_sources_sinks(motif)
    assert sources == [motif.source] and sinks == [motif.sink]
    assert motif.num_nodes == 4


def test_single_conv_model_is_one_primitive_edge():
    text = json.dumps({
        "input": {"channels": 3, "height": 8, "width": 8},
        "layers": [{"id": "c", "kind": "conv", "k": 3, "pad": 1, "out": 4}],
    })
    h = build_hier_graph(parse_model(text))
    assert h.motifs == {}
    assert h.top.edges == [(0, 1, "conv3")]


def test_chain_of_three_identical_motifs():
    desc = parse_model(zoo.to_text(zoo.chain_of_blocks(n=3, path_len=2)))
    h = build_hier_graph(desc)
    assert len(h.motifs) == 1  # identical pattern deduplicates
    assert h.top.num_nodes == 4
    name = next(iter(h.motifs))
    assert [t for _, _, t in h.top.edges] == [name] * 3


def test_flatten_single_motif_adds_internal_nodes():
    desc = parse_model(zoo.to_text(zoo.chain_of_blocks(n=1, path_len=3)))
    h = build_hier_graph(desc)
    motif = next(iter(h.motifs.values())).graph
    internal = motif.num_nodes - 2
    flat = flatten(h)
    assert flat.num_nodes == h.top.num_nodes + internal


def test_flatten_chain_counts():
    # 3 motifs, each an internal path of length 2: 7 nodes, 6 edges
    desc = parse_model(zoo.to_text(zoo.chain_of_blocks(n=3, path_len=2)))
    flat = flatten(build_hier_graph(desc))
    assert flat.num_nodes == 7
    assert len(flat.edges) == 6
    assert is_dag(flat)


def test_flatten_branch_block_matches_hand_drawing():
    # source, two mid nodes, sink; 4 typed edges
    flat = flatten(build_hier_graph(parse_model(zoo.to_text(zoo.branch_block()))))
    assert flat.num_nodes == 4
    assert len(flat.edges) == 4
    assert sorted(t for _, _, t in flat.edges) == ["conv1", "conv1", "conv3", "conv3"]
    sources = [i for i in range(flat.num_nodes)
               if not any(d == i for _, d, _ in flat.edges)]
    assert sources == [flat.source]


def test_flatten_levels_one_equals_record_graph():
    desc = parse_model(zoo.to_text(zoo.chain_of_blocks(n=2, path_len=2)))
    flat1 = flatten(build_hier_graph(desc, levels=1))
    flat2 = flatten(build_hier_graph(desc, levels=2))
    assert flat1.num_nodes == flat2.num_nodes
    assert sorted(t for _, _, t in flat1.edges) == sorted(t for _, _, t in flat2.edges)


def test_flatten_deterministic():
    desc = parse_model(zoo.to_text(zoo.toy_resnet(num_blocks=2)))
    a = flatten(build_hier_graph(desc))
    b = flatten(build_hier_graph(desc))
    assert a.num_nodes == b.num_nodes
    assert a.edges == b.edges
    assert a.layer_of_origin == b.layer_of_origin


def test_layer_of_origin_labels_cover_param_layers():
    desc = parse_model(zoo.to_text(zoo.toy_resnet(num_blocks=2)))
    flat = flatten(build_hier_graph(desc))
    labels = set(flat.layer_of_origin)
    assert all(0 <= o <= desc.num_layers for o in flat.layer_of_origin)
    # A layer's output state may be absorbed by a join (converging branches
    # share one node); every other parameterized layer must own a node.
    merged = set()
    for rec in desc.layers:
        if rec.kind == "join":
            merged.update(desc.layer(s).index for s in rec.join_of)
    for rec in desc.layers:
        if rec.has_params and rec.index not in merged:
            assert rec.index in labels, f"no node originates from {rec.id}"
    assert is_dag(flat)


def test_residual_join_becomes_splitting_edge():
    desc = parse_model(zoo.to_text(
        zoo.toy_resnet(num_blocks=1, identity_shortcuts=True)))
    flat = flatten(build_hier_graph(desc))
    assert any(t == "splitting" for _, _, t in flat.edges)
    assert is_dag(flat)


def test_unmappable_kind_raises():
    desc = parse_model(zoo.to_text(zoo.toy_cnn()))
    ops = PrimitiveOpSet(types=("conv3", "relu", "avgpool2"))  # no conv1 for linear
    with pytest.raises(GraphError, match="conv1"):
        build_hier_graph(desc, ops=ops)


def test_feature_width_is_two_vocab_plus_two():
    flat = build_flat_graph(parse_model(zoo.to_text(zoo.toy_cnn())))
    assert flat.features.shape[1] == 2 * len(hgraph.DEFAULT_PRIMITIVE_OPS) + 2
    assert flat.features.shape[1] == 24


def test_source_out_histogram_counts_edges():
    flat = FlatGraph(num_nodes=3, edges=[(0, 1, "conv1"), (0, 2, "conv1")],
                     layer_of_origin=[0, 1, 2],
                     edge_types=hgraph.DEFAULT_PRIMITIVE_OPS, source=0, sink=2)
    init_node_features(flat)
    t = len(hgraph.DEFAULT_PRIMITIVE_OPS)
    conv1 = hgraph.DEFAULT_PRIMITIVE_OPS.index("conv1")
    assert flat.features[0, t + conv1] == 2.0       # out histogram
    assert np.all(flat.features[0, :t] == 0.0)      # in histogram empty


def test_identical_incident_multisets_identical_features():
    flat = FlatGraph(num_nodes=4,
                     edges=[(0, 1, "conv3"), (0, 2, "conv3"),
                            (1, 3, "relu"), (2, 3, "relu")],
                     layer_of_origin=[0, 1, 2, 3],
                     edge_types=hgraph.DEFAULT_PRIMITIVE_OPS, source=0, sink=3)
    init_node_features(flat)
    assert np.array_equal(flat.features[1], flat.features[2])


def test_expand_channels_widths_and_edges():
    text = json.dumps({
        "input": {"channels": 2, "height": 4, "width": 4},
        "layers": [
            {"id": "c", "kind": "conv", "k": 3, "pad": 1, "out": 3},
            {"id": "r", "kind": "relu"},
        ],
    })
    desc = parse_model(text)
    flat = flatten(build_hier_graph(desc))
    wide = expand_channels(flat, desc)
    assert wide.num_nodes == 2 + 3 + 3
    conv_edges = [e for e in wide.edges if e[2] == "conv3"]
    relu_edges = [e for e in wide.edges if e[2] == "relu"]
    assert len(conv_edges) == 2 * 3   # complete bipartite
    assert len(relu_edges) == 3       # channel-aligned
    assert is_dag(wide)
    # origin labels preserved per channel
    assert wide.layer_of_origin == [0, 0, 1, 1, 1, 2, 2, 2]


def test_graph_json_round_trip_stable():
    flat = build_flat_graph(parse_model(zoo.to_text(zoo.toy_cnn())))
    doc1 = hgraph.graph_to_json(flat)
    doc2 = hgraph.graph_to_json(build_flat_graph(parse_model(zoo.to_text(zoo.toy_cnn()))))
    assert doc1 == doc2
    parsed = json.loads(doc1)
    assert len(parsed["nodes"]) == flat.num_nodes
    assert len(parsed["edges"]) == len(flat.edges)


def test_toy_resnet_probe_graph_is_large_with_multichannel_classes():
    desc = parse_model(zoo.to_text(zoo.toy_resnet(num_blocks=8, distinct_widths=True)))
    wide = build_flat_graph(desc, expand=True)
    assert wide.num_nodes >= 200
    counts = {}
    for org in wide.layer_of_origin:
        counts[org] = counts.get(org, 0) + 1
    assert min(counts.values()) >= 3  # every class has a node population

"""Built-in model descriptions (JSON documents as dicts)."""

import json


def to_text(doc: dict) -> str:
    return json.dumps(doc, indent=1)


def toy_cnn(in_hw=8, widths=(8, 16, 16, 16), classes=3) -> dict:
    """Four-conv classifier on small RGB images; the default pruning target."""
    w1, w2, w3, w4 = widths
    return {
        "name": "toy_cnn",
        "input": {"channels": 3, "height": in_hw, "width": in_hw},
        "layers": [
            {"id": "conv1", "kind": "conv", "k": 3, "stride": 1, "pad": 1, "out": w1},
            {"id": "relu1", "kind": "relu"},
            {"id": "conv2", "kind": "conv", "k": 3, "stride": 2, "pad": 1, "out": w2},
            {"id": "relu2", "kind": "relu"},
            {"id": "conv3", "kind": "conv", "k": 3, "stride": 1, "pad": 1, "out": w3},
            {"id": "relu3", "kind": "relu"},
            {"id": "conv4", "kind": "conv", "k": 3, "stride": 2, "pad": 1, "out": w4},
            {"id": "relu4", "kind": "relu"},
            {"id": "pool", "kind": "avgpool", "k": 2, "stride": 2},
            {"id": "fc", "kind": "linear", "out": classes},
        ],
    }


def residual_block(name, src, width, stride=1, project=True) -> list:
    """conv-bn-relu-conv-bn main path plus a 1x1 projection shortcut."""
    layers = [
        {"id": f"{name}_c1", "kind": "conv", "k": 3, "stride": stride, "pad": 1,
         "out": width, "after": src, "block": name},
        {"id": f"{name}_b1", "kind": "batchnorm", "block": name},
        {"id": f"{name}_r1", "kind": "relu", "block": name},
        {"id": f"{name}_c2", "kind": "conv", "k": 3, "stride": 1, "pad": 1,
         "out": width, "block": name},
        {"id": f"{name}_b2", "kind": "batchnorm", "block": name},
    ]
    if project:
        layers += [
            {"id": f"{name}_p", "kind": "conv", "k": 1, "stride": stride, "pad": 0,
             "out": width, "after": src, "block": name},
            {"id": f"{name}_j", "kind": "join", "of": [f"{name}_b2", f"{name}_p"],
             "block": name},
        ]
    else:
        layers += [
            {"id": f"{name}_j", "kind": "join", "from": src, "after": f"{name}_b2",
             "block": name},
        ]
    layers.append({"id": f"{name}_out", "kind": "relu", "block": name})
    return layers


def toy_resnet(num_blocks=3, base_width=4, in_hw=8, classes=3,
               distinct_widths=False, identity_shortcuts=False) -> dict:
    """Stack of residual blocks with a conv stem and linear head.

    ``distinct_widths`` gives every block its own channel count so each
    layer has a structurally unique neighborhood (used by the labeling
    probe); ``identity_shortcuts`` uses in-block identity joins instead of
    projection convs (requires constant width).
    """
    layers = [
        {"id": "stem", "kind": "conv", "k": 3, "stride": 1, "pad": 1, "out": base_width},
        {"id": "stem_r", "kind": "relu"},
    ]
    src = "stem_r"
    width = base_width
    for i in range(num_blocks):
        width = base_width + i if distinct_widths else base_width
        layers += residual_block(f"blk{i}", src, width,
                                 project=not identity_shortcuts)
        src = f"blk{i}_out"
    layers += [
        {"id": "head_pool", "kind": "avgpool", "k": 2, "stride": 2, "after": src},
        {"id": "head_fc", "kind": "linear", "out": classes},
    ]
    return {
        "name": "toy_resnet",
        "input": {"channels": 3, "height": in_hw, "width": in_hw},
        "layers": layers,
    }


def branch_block() -> dict:
    """Two conv1->conv3 paths from one source merging at one sink."""
    return {
        "name": "branch_block",
        "input": {"channels": 4, "height": 8, "width": 8},
        "layers": [
            {"id": "a", "kind": "conv", "k": 1, "stride": 1, "pad": 0, "out": 4,
             "after": "input", "block": "bb"},
            {"id": "b", "kind": "conv", "k": 3, "stride": 1, "pad": 1, "out": 4,
             "after": "a", "block": "bb"},
            {"id": "c", "kind": "conv", "k": 1, "stride": 1, "pad": 0, "out": 4,
             "after": "input", "block": "bb"},
            {"id": "d", "kind": "conv", "k": 3, "stride": 1, "pad": 1, "out": 4,
             "after": "c", "block": "bb"},
            {"id": "y", "kind": "join", "of": ["b", "d"], "block": "bb"},
        ],
    }


def chain_of_blocks(n=3, width=4, path_len=2, in_hw=8) -> dict:
    """n identical conv-chain blocks in series (one motif, n instances)."""
    layers = []
    src = "input"
    for i in range(n):
        for j in range(path_len):
            layers.append({"id": f"b{i}_c{j}", "kind": "conv", "k": 3, "stride": 1,
                           "pad": 1, "out": width, "after": src, "block": f"b{i}"})
            src = f"b{i}_c{j}"
    return {
        "name": "chain",
        "input": {"channels": width, "height": in_hw, "width": in_hw},
        "layers": layers,
    }

"""Ready-made graph descriptions used by the experiments and tests."""
from __future__ import annotations

from typing import Any, Dict, List, Sequence, Tuple

from .graph import Graph, build_graph


def _conv(nid: str, cin: int, cout: int, k: int = 3, **params) -> Dict[str, Any]:
    return {"id": nid, "kind": "Conv2d",
            "params": {"in_channels": cin, "out_channels": cout, "kernel_size": k,
                       "padding": k // 2, **params}}


def _bn(nid: str, c: int) -> Dict[str, Any]:
    return {"id": nid, "kind": "BatchNorm", "params": {"num_features": c}}


def _block(prefix: str, cin: int, cout: int) -> List[Dict[str, Any]]:
    return [_conv(f"{prefix}.conv", cin, cout), _bn(f"{prefix}.bn", cout),
            {"id": f"{prefix}.relu", "kind": "ReLU"},
            {"id": f"{prefix}.pool", "kind": "MaxPool", "params": {"kernel_size": 2}}]


def seed_cnn_description(input_shape: Sequence[int] = (1, 16, 16), num_classes: int = 3,
                         widths: Sequence[int] = (16, 32, 32)) -> Dict[str, Any]:
    """Conv-BN-ReLU-MaxPool blocks followed by Flatten and a linear classifier."""
    c, h, w = input_shape
    nodes: List[Dict[str, Any]] = []
    cin = c
    for i, width in enumerate(widths):
        nodes += _block(f"b{i + 1}", cin, width)
        cin = width
        h, w = h // 2, w // 2
    nodes.append({"id": "flatten", "kind": "Flatten"})
    nodes.append({"id": "fc", "kind": "Linear",
                  "params": {"in_features": cin * h * w, "out_features": num_classes}})
    return {"inputs": [{"id": "x", "shape": list(input_shape)}], "nodes": nodes}


def seed_cnn(input_shape: Sequence[int] = (1, 16, 16), num_classes: int = 3,
             widths: Sequence[int] = (16, 32, 32), seed: int = 0) -> Graph:
    return build_graph(seed_cnn_description(input_shape, num_classes, widths), seed=seed)


def branch_menu(cin: int, cout: int) -> List[List[Dict[str, Any]]]:
    """3x3 conv, 5x5 conv, depthwise-separable 3x3 and, when widths match, identity.

    Every conv path ends with BatchNorm and ReLU.
    """
    tail = [_bn("bn", cout), {"id": "relu", "kind": "ReLU"}]
    menu = [
        [_conv("conv3", cin, cout, 3)] + tail,
        [_conv("conv5", cin, cout, 5)] + tail,
        [{"id": "dw", "kind": "DepthwiseConv2d",
          "params": {"channels": cin, "kernel_size": 3, "padding": 1}},
         _conv("pw", cin, cout, 1)] + tail,
    ]
    if cin == cout:
        menu.append([{"id": "skip", "kind": "Identity"}])
    return menu


def supernet_cnn_description(input_shape: Sequence[int] = (1, 16, 16), num_classes: int = 3,
                             widths: Sequence[int] = (16, 32, 32)) -> Dict[str, Any]:
    """The seed CNN with every conv stage replaced by a searchable module.

    Choosing the 3x3 path everywhere gives back :func:`seed_cnn_description`.
    """
    c, h, w = input_shape
    nodes: List[Dict[str, Any]] = []
    cin = c
    for i, width in enumerate(widths):
        nodes.append({"id": f"b{i + 1}", "kind": "SuperNet",
                      "supernet_branches": branch_menu(cin, width)})
        nodes.append({"id": f"b{i + 1}.pool", "kind": "MaxPool", "params": {"kernel_size": 2}})
        cin = width
        h, w = h // 2, w // 2
    nodes.append({"id": "flatten", "kind": "Flatten"})
    nodes.append({"id": "fc", "kind": "Linear",
                  "params": {"in_features": cin * h * w, "out_features": num_classes}})
    return {"inputs": [{"id": "x", "shape": list(input_shape)}], "nodes": nodes}


def supernet_cnn(input_shape: Sequence[int] = (1, 16, 16), num_classes: int = 3,
                 widths: Sequence[int] = (16, 32, 32), seed: int = 0) -> Graph:
    return build_graph(supernet_cnn_description(input_shape, num_classes, widths), seed=seed)


def residual_fixture_description(channels: int = 8, width: int = 16,
                                 input_shape: Tuple[int, int, int] = (3, 8, 8),
                                 num_classes: int = 4) -> Dict[str, Any]:
    """3x3 conv -> depthwise conv -> two parallel 1x1 convs -> Add -> Flatten -> FC."""
    c, h, w = input_shape
    return {
        "inputs": [{"id": "x", "shape": list(input_shape)}],
        "nodes": [
            _conv("conv3x3", c, channels, 3),
            {"id": "dw", "kind": "DepthwiseConv2d",
             "params": {"channels": channels, "kernel_size": 3, "padding": 1}},
            _conv("pw_a", channels, width, 1),
            _conv("pw_b", channels, width, 1),
            {"id": "add", "kind": "Add"},
            {"id": "flatten", "kind": "Flatten"},
            {"id": "fc", "kind": "Linear",
             "params": {"in_features": width * h * w, "out_features": num_classes}},
        ],
        "edges": [["x", "conv3x3", 0], ["conv3x3", "dw", 0], ["dw", "pw_a", 0], ["dw", "pw_b", 0],
                  ["pw_a", "add", 0], ["pw_b", "add", 1], ["add", "flatten", 0],
                  ["flatten", "fc", 0]],
        "outputs": ["fc"],
    }


def residual_fixture(seed: int = 0, **kwargs) -> Graph:
    return build_graph(residual_fixture_description(**kwargs), seed=seed)


SEEDS = {
    "seed_cnn": seed_cnn_description,
    "supernet_cnn": supernet_cnn_description,
    "residual_fixture": residual_fixture_description,
}

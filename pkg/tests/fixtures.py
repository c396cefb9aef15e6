"""Small graph fixtures shared across test modules."""
from __future__ import annotations

import numpy as np

from forge import zoo
from forge.data import Split
from forge.graph import build_graph


def conv(nid, cin, cout, k=3, **params):
    return zoo._conv(nid, cin, cout, k, **params)


def randomize_bn(g, rng):
    """Give every BatchNorm non-trivial affine parameters and running statistics."""
    for nid in g.nodes_of_kind("BatchNorm"):
        w = g.nodes[nid].weights
        c = w["weight"].shape[0]
        w["weight"].data = rng.uniform(0.5, 2.0, c).astype(np.float32)
        w["bias"].data = rng.standard_normal(c).astype(np.float32)
        w["running_mean"].data = (rng.standard_normal(c) * 0.5).astype(np.float32)
        w["running_var"].data = rng.uniform(0.3, 2.0, c).astype(np.float32)
    return g


def conv_bn_fixture(seed):
    """A random conv (or linear) followed by BatchNorm."""
    rng = np.random.default_rng(seed)
    if seed % 5 == 4:
        f, o = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        desc = {"inputs": [{"id": "x", "shape": [f]}],
                "nodes": [{"id": "lin", "kind": "Linear",
                           "params": {"in_features": f, "out_features": o,
                                      "bias": bool(rng.integers(2))}},
                          {"id": "bn", "kind": "BatchNorm", "params": {"num_features": o}}]}
    else:
        cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        size = int(rng.integers(k, 9))
        desc = {"inputs": [{"id": "x", "shape": [cin, size, size]}],
                "nodes": [conv("c", cin, cout, k, stride=stride, bias=bool(rng.integers(2))),
                          {"id": "bn", "kind": "BatchNorm", "params": {"num_features": cout}},
                          {"id": "r", "kind": "ReLU"}]}
    g = build_graph(desc, seed=seed)
    return randomize_bn(g, rng)


def random_input(g, n, rng):
    return rng.standard_normal((n,) + tuple(g.nodes[g.inputs[0]].params["shape"])).astype(np.float32)


def chain_fixture():
    """Conv -> ReLU -> Conv -> Flatten -> Linear."""
    return build_graph({"inputs": [{"id": "x", "shape": [3, 4, 4]}],
                        "nodes": [conv("c1", 3, 6), {"id": "r", "kind": "ReLU"}, conv("c2", 6, 5),
                                  {"id": "f", "kind": "Flatten"},
                                  {"id": "fc", "kind": "Linear",
                                   "params": {"in_features": 80, "out_features": 2}}]})


def diamond_fixture():
    """stem -> (a1 -> a2, b1 -> b2) -> Add -> Flatten -> Linear."""
    return build_graph({
        "inputs": [{"id": "x", "shape": [2, 4, 4]}],
        "nodes": [conv("stem", 2, 4), conv("a1", 4, 5), conv("a2", 5, 6),
                  conv("b1", 4, 3), conv("b2", 3, 6), {"id": "add", "kind": "Add"},
                  {"id": "f", "kind": "Flatten"},
                  {"id": "fc", "kind": "Linear", "params": {"in_features": 96, "out_features": 3}}],
        "edges": [["x", "stem"], ["stem", "a1"], ["a1", "a2"], ["stem", "b1"], ["b1", "b2"],
                  ["a2", "add", 0], ["b2", "add", 1], ["add", "f"], ["f", "fc"]],
        "outputs": ["fc"]})


def concat_fixture():
    """Two convs concatenated on channels, then a conv, flatten and a classifier."""
    return build_graph({
        "inputs": [{"id": "x", "shape": [2, 4, 4]}],
        "nodes": [conv("p", 2, 3), conv("q", 2, 5), {"id": "cat", "kind": "Concat"},
                  {"id": "r", "kind": "ReLU"}, conv("post", 8, 4),
                  {"id": "pool", "kind": "MaxPool", "params": {"kernel_size": 2}},
                  {"id": "f", "kind": "Flatten"},
                  {"id": "fc", "kind": "Linear", "params": {"in_features": 16, "out_features": 2}}],
        "edges": [["x", "p"], ["x", "q"], ["p", "cat", 0], ["q", "cat", 1], ["cat", "r"],
                  ["r", "post"], ["post", "pool"], ["pool", "f"], ["f", "fc"]],
        "outputs": ["fc"]})


def wide_pair_fixture(cout=32):
    """Seed conv 16 -> ``cout`` followed by a consumer conv, flatten and classifier."""
    return build_graph({"inputs": [{"id": "x", "shape": [16, 4, 4]}],
                        "nodes": [conv("seed", 16, cout), {"id": "r", "kind": "ReLU"},
                                  conv("next", cout, 8), {"id": "f", "kind": "Flatten"},
                                  {"id": "fc", "kind": "Linear",
                                   "params": {"in_features": 128, "out_features": 3}}]})


def bn_cnn_fixture(seed=0):
    """Seed-style CNN with randomized BN statistics, 3x8x8 input."""
    g = zoo.seed_cnn(input_shape=(3, 8, 8), num_classes=4, widths=(6, 8), seed=seed)
    return randomize_bn(g, np.random.default_rng(seed))


def xor_task(seed, n=400, f=8):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, f)).astype(np.float32)
    return Split(x, ((x[:, 0] * x[:, 1]) > 0).astype(np.int64))


def xor_supernet(seed, f=8):
    """A nonlinear branch able to solve the task next to an identity branch that cannot."""
    return build_graph({"inputs": [{"id": "x", "shape": [f]}], "nodes": [
        {"id": "m", "kind": "SuperNet", "supernet_branches": [
            [{"id": "lin", "kind": "Linear", "params": {"in_features": f, "out_features": f}},
             {"id": "relu", "kind": "ReLU"}],
            [{"id": "skip", "kind": "Identity"}]]},
        {"id": "head", "kind": "Linear", "params": {"in_features": f, "out_features": 2}}]},
        seed=seed)


FIXTURES = {
    "residual": lambda: zoo.residual_fixture(seed=3),
    "chain": chain_fixture,
    "diamond": diamond_fixture,
    "concat": concat_fixture,
    "bn_cnn": bn_cnn_fixture,
}

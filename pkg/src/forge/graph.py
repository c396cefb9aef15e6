"""Explicit DAG representation of a network.

A :class:`Graph` is a set of :class:`Node` objects plus ordered edges
``(producer, consumer, slot)``. Models are described declaratively as JSON::

    {"inputs": [{"id": "x", "shape": [1, 16, 16]}],
     "nodes": [{"id": "c1", "kind": "Conv2d", "params": {...}}, ...],
     "edges": [["x", "c1", 0], ...],
     "outputs": ["fc"]}

When ``edges`` is omitted the nodes are chained in listing order. A node of
kind ``SuperNet`` carries ``supernet_branches`` (each a chain of node
descriptions, possibly empty for an identity path) and is expanded into
parallel branches joined by a ``SuperNetCombiner`` node.
"""
from __future__ import annotations

import copy
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import checkpoint
from .functional import conv_output_size, pair
from .tensor import Tensor

CONV_KINDS = ("Conv2d", "DepthwiseConv2d")
TARGET_KINDS = ("Conv2d", "DepthwiseConv2d", "Linear")
KINDS = (
    "Input", "Output", "Conv2d", "DepthwiseConv2d", "Linear", "BatchNorm", "ReLU",
    "MaxPool", "AvgPool", "GlobalAvgPool", "Add", "Concat", "Flatten", "Identity",
    "SuperNetCombiner",
)
REQUIRED_PARAMS = {
    "Input": ("shape",),
    "Conv2d": ("in_channels", "out_channels", "kernel_size"),
    "DepthwiseConv2d": ("channels", "kernel_size"),
    "Linear": ("in_features", "out_features"),
    "BatchNorm": ("num_features",),
    "MaxPool": ("kernel_size",),
    "AvgPool": ("kernel_size",),
    "SuperNetCombiner": ("branches",),
}
PARAM_DEFAULTS = {
    "Conv2d": {"stride": 1, "padding": 0, "groups": 1, "bias": True},
    "DepthwiseConv2d": {"stride": 1, "padding": 0, "bias": True},
    "Linear": {"bias": True},
    "BatchNorm": {"eps": 1e-5, "momentum": 0.1},
    "MaxPool": {"padding": 0},
    "AvgPool": {"padding": 0},
    "Concat": {"axis": 1},
    "Input": {"nonnegative": True},
}
# buffers are stored alongside weights but never trained
BUFFERS = ("running_mean", "running_var")


class GraphError(ValueError):
    """Malformed graph description or structure."""


class ShapeInferenceError(GraphError):
    pass


@dataclass
class Node:
    id: str
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)
    weights: Dict[str, Tensor] = field(default_factory=dict)
    annotations: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown op kind {self.kind!r} for node {self.id!r}")
        merged = dict(PARAM_DEFAULTS.get(self.kind, {}))
        merged.update(self.params)
        self.params = merged
        for key in REQUIRED_PARAMS.get(self.kind, ()):
            if key not in self.params:
                raise GraphError(f"node {self.id!r} ({self.kind}) is missing parameter {key!r}")
            values = self.params[key]
            values = values if isinstance(values, (list, tuple)) else [values]
            if not all(isinstance(v, (int, np.integer)) and v > 0 for v in values):
                raise GraphError(f"node {self.id!r}: parameter {key}={self.params[key]!r} "
                                 "must be positive integer(s)")

    @property
    def out_channels(self) -> Optional[int]:
        p = self.params
        return {"Conv2d": p.get("out_channels"), "DepthwiseConv2d": p.get("channels"),
                "Linear": p.get("out_features"), "BatchNorm": p.get("num_features")}.get(self.kind)

    def weight_shapes(self) -> Dict[str, Tuple[int, ...]]:
        p = self.params
        shapes: Dict[str, Tuple[int, ...]] = {}
        if self.kind == "Conv2d":
            kh, kw = pair(p["kernel_size"])
            if p["in_channels"] % p["groups"] or p["out_channels"] % p["groups"]:
                raise GraphError(f"node {self.id!r}: channels not divisible by groups={p['groups']}")
            shapes["weight"] = (p["out_channels"], p["in_channels"] // p["groups"], kh, kw)
            if p["bias"]:
                shapes["bias"] = (p["out_channels"],)
        elif self.kind == "DepthwiseConv2d":
            kh, kw = pair(p["kernel_size"])
            shapes["weight"] = (p["channels"], 1, kh, kw)
            if p["bias"]:
                shapes["bias"] = (p["channels"],)
        elif self.kind == "Linear":
            shapes["weight"] = (p["out_features"], p["in_features"])
            if p["bias"]:
                shapes["bias"] = (p["out_features"],)
        elif self.kind == "BatchNorm":
            c = p["num_features"]
            shapes = {"weight": (c,), "bias": (c,), "running_mean": (c,), "running_var": (c,)}
        return shapes

    def conv_geometry(self) -> Dict[str, Any]:
        """kernel/stride/padding/groups of a conv node as plain tuples."""
        p = self.params
        groups = p["channels"] if self.kind == "DepthwiseConv2d" else p.get("groups", 1)
        return {"kernel_size": pair(p["kernel_size"]), "stride": pair(p.get("stride", 1)),
                "padding": pair(p.get("padding", 0)), "groups": groups}

    def copy(self) -> "Node":
        weights = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                   for k, v in self.weights.items()}
        node = Node.__new__(Node)
        node.id, node.kind = self.id, self.kind
        node.params = copy.deepcopy(self.params)
        node.weights = weights
        node.annotations = dict(self.annotations)
        return node


class Graph:
    """Nodes keyed by id plus ordered ``(src, dst, slot)`` edges."""

    def __init__(self):
        self.nodes: Dict[str, Node] = {}
        self.edges: List[Tuple[str, str, int]] = []
        self.inputs: List[str] = []
        self.outputs: List[str] = []

    # -- construction ------------------------------------------------------
    def add_node(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise GraphError(f"duplicate node id {node.id!r}")
        self.nodes[node.id] = node
        if node.kind == "Input":
            self.inputs.append(node.id)
        elif node.kind == "Output":
            self.outputs.append(node.id)
        return node

    def add_edge(self, src: str, dst: str, slot: int = 0) -> None:
        for end in (src, dst):
            if end not in self.nodes:
                raise GraphError(f"edge {src}->{dst} references unknown node {end!r}")
        self.edges.append((src, dst, int(slot)))

    def remove_node(self, node_id: str) -> None:
        node = self.nodes.pop(node_id)
        self.edges = [e for e in self.edges if node_id not in (e[0], e[1])]
        if node.kind == "Input":
            self.inputs.remove(node_id)
        elif node.kind == "Output":
            self.outputs.remove(node_id)

    def bypass(self, node_id: str) -> None:
        """Remove a single-input node, rewiring its consumers to its producer."""
        preds = self.predecessors(node_id)
        if len(preds) != 1:
            raise GraphError(f"cannot bypass {node_id!r} with {len(preds)} inputs")
        src = preds[0]
        self.edges = [(src if s == node_id else s, d, k) for s, d, k in self.edges]
        self.remove_node(node_id)

    def copy(self) -> "Graph":
        g = Graph()
        g.nodes = {k: n.copy() for k, n in self.nodes.items()}
        g.edges = list(self.edges)
        g.inputs = list(self.inputs)
        g.outputs = list(self.outputs)
        return g

    # -- queries -----------------------------------------------------------
    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def __getitem__(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def __len__(self) -> int:
        return len(self.nodes)

    def predecessors(self, node_id: str) -> List[str]:
        ins = sorted((k, s) for s, d, k in self.edges if d == node_id)
        return [s for _, s in ins]

    def successors(self, node_id: str) -> List[Tuple[str, int]]:
        return [(d, k) for s, d, k in self.edges if s == node_id]

    def topological_order(self) -> List[str]:
        """Kahn's algorithm, ties broken by node insertion order."""
        rank = {nid: i for i, nid in enumerate(self.nodes)}
        indeg = {nid: 0 for nid in self.nodes}
        for _, d, _ in self.edges:
            indeg[d] += 1
        ready = sorted((nid for nid, k in indeg.items() if k == 0), key=rank.get)
        order = []
        succ: Dict[str, List[str]] = {nid: [] for nid in self.nodes}
        for s, d, _ in self.edges:
            succ[s].append(d)
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for d in succ[nid]:
                indeg[d] -= 1
                if indeg[d] == 0:
                    ready.append(d)
            ready.sort(key=rank.get)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return order

    def ancestors(self, node_id: str) -> set:
        seen, stack = set(), [node_id]
        while stack:
            for p in self.predecessors(stack.pop()):
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def nodes_of_kind(self, *kinds: str) -> List[str]:
        return [nid for nid in self.topological_order() if self.nodes[nid].kind in kinds]

    def parameters(self) -> List[Tensor]:
        return [t for nid in self.topological_order()
                for name, t in self.nodes[nid].weights.items() if name not in BUFFERS]

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {}
        for nid in self.topological_order():
            node = self.nodes[nid]
            for name, t in node.weights.items():
                out[f"{nid}.{name}"] = t.data
            record = node.annotations.get("folded_bn")
            if record is not None:
                for key in ("gamma", "beta", "mean", "var"):
                    out[f"{nid}.folded_bn.{key}"] = record[key]
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for key, value in state.items():
            nid, name = split_state_key(key)
            if nid not in self.nodes:
                continue
            node = self.nodes[nid]
            if name.startswith("folded_bn."):
                node.annotations.setdefault("folded_bn", {})[name.split(".", 1)[1]] = \
                    np.asarray(value, dtype=np.float32)
                continue
            if name not in node.weights:
                raise GraphError(f"checkpoint entry {key!r} has no matching weight")
            if node.weights[name].shape != tuple(value.shape):
                raise GraphError(f"checkpoint entry {key!r}: shape {tuple(value.shape)} "
                                 f"!= {node.weights[name].shape}")
            node.weights[name].data = np.array(value, dtype=np.float32)

    def validate(self, input_shape=None) -> Dict[str, Tuple[int, ...]]:
        self.topological_order()
        for nid, node in self.nodes.items():
            preds = self.predecessors(nid)
            slots = sorted(k for s, d, k in self.edges if d == nid)
            if node.kind == "Input":
                if preds:
                    raise GraphError(f"input node {nid!r} has incoming edges")
                continue
            if not slots:
                raise GraphError(f"node {nid!r} ({node.kind}) has no inputs")
            if slots != list(range(len(slots))):
                raise GraphError(f"node {nid!r} has non-contiguous input slots {slots}")
            arity = _ARITY.get(node.kind, 1)
            if node.kind == "SuperNetCombiner":
                arity = node.params["branches"]
            if arity is not None and len(slots) != arity:
                raise GraphError(f"node {nid!r} ({node.kind}) expects {arity} inputs, "
                                 f"got {len(slots)}")
            for name, shape in node.weight_shapes().items():
                w = node.weights.get(name)
                if w is None:
                    raise GraphError(f"node {nid!r} is missing weight {name!r}")
                if w.shape != shape:
                    raise GraphError(f"node {nid!r}: weight {name!r} has shape {w.shape}, "
                                     f"expected {shape}")
        return infer_shapes(self, input_shape)


_ARITY = {"Add": None, "Concat": None, "SuperNetCombiner": None}


# ---------------------------------------------------------------------------
# weight initialization
# ---------------------------------------------------------------------------

def _node_rng(seed: int, node_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(node_id.encode())])


def init_weights(node: Node, seed: int = 0) -> None:
    """He-uniform weights and small uniform biases, deterministic per node id."""
    rng = _node_rng(seed, node.id)
    for name, shape in node.weight_shapes().items():
        if node.kind == "BatchNorm":
            value = np.ones(shape) if name in ("weight", "running_var") else np.zeros(shape)
        else:
            wshape = node.weight_shapes()["weight"]
            fan_in = int(np.prod(wshape[1:]))
            bound = np.sqrt(6.0 / fan_in) if name == "weight" else 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        node.weights[name] = Tensor(value.astype(np.float32), requires_grad=name not in BUFFERS)


# ---------------------------------------------------------------------------
# declarative builder
# ---------------------------------------------------------------------------

def _make_node(desc: Mapping[str, Any], node_id: str, seed: int) -> Node:
    node = Node(node_id, desc["kind"], dict(desc.get("params", {})))
    if node.kind == "Input":
        node.params["shape"] = list(node.params["shape"])
    init_weights(node, seed)
    for name, value in desc.get("weights", {}).items():
        if name not in node.weights:
            raise GraphError(f"node {node_id!r} has no weight named {name!r}")
        arr = np.asarray(value, dtype=np.float32)
        if arr.shape != node.weights[name].shape:
            raise GraphError(f"node {node_id!r}: weight {name!r} shape {arr.shape} "
                             f"!= {node.weights[name].shape}")
        node.weights[name] = Tensor(arr, requires_grad=name not in BUFFERS)
    if desc.get("annotations"):
        node.annotations.update(copy.deepcopy(desc["annotations"]))
    return node


def build_graph(description: Union[str, Mapping[str, Any]], seed: Optional[int] = None,
                input_shape=None) -> Graph:
    """Build and validate a :class:`Graph` from a JSON description.

    :param description: a JSON string, or an already parsed mapping
    :param seed: weight-initialization seed (defaults to ``description["seed"]`` or 0)
    :param input_shape: optional batch-inclusive shape used for validation
    :raises GraphError: on unknown kinds, missing parameters, dangling edges,
        shape-inference failures or mismatching supernet branches
    """
    desc = json.loads(description) if isinstance(description, str) else description
    seed = desc.get("seed", 0) if seed is None else seed
    g = Graph()
    for entry in desc.get("inputs", []):
        if isinstance(entry, Mapping):
            g.add_node(Node(entry["id"], "Input", {"shape": list(entry["shape"]),
                                                     **entry.get("params", {})}))
    chain_prev: Optional[str] = g.inputs[-1] if g.inputs else None
    implicit_edges = "edges" not in desc
    # maps a supernet module id to (entry node ids per branch, combiner id)
    modules: Dict[str, List[Optional[str]]] = {}

    for i, entry in enumerate(desc.get("nodes", [])):
        nid = entry.get("id", f"n{i}")
        kind = entry.get("kind")
        if kind == "SuperNet" or "supernet_branches" in entry:
            entries = _expand_supernet(g, nid, entry, seed)
            modules[nid] = entries
            if implicit_edges and chain_prev is not None:
                _connect_module(g, chain_prev, nid, entries)
        else:
            g.add_node(_make_node(entry, nid, seed))
            if implicit_edges and chain_prev is not None and kind != "Input":
                g.add_edge(chain_prev, nid, 0)
        chain_prev = nid

    for edge in desc.get("edges", []):
        src, dst = edge[0], edge[1]
        slot = edge[2] if len(edge) > 2 else 0
        if dst in modules:
            _connect_module(g, src, dst, modules[dst])
        else:
            g.add_edge(src, dst, slot)

    outputs = desc.get("outputs")
    if outputs is None and implicit_edges and chain_prev is not None \
            and g.nodes[chain_prev].kind != "Output":
        outputs = [chain_prev]
    for j, oid in enumerate(outputs or []):
        if oid not in g.nodes:
            raise GraphError(f"output {oid!r} is not a node")
        if g.nodes[oid].kind != "Output":
            out_id = f"output{j}" if f"output{j}" not in g.nodes else f"{oid}.output"
            g.add_node(Node(out_id, "Output"))
            g.add_edge(oid, out_id, 0)
    if not g.inputs:
        raise GraphError("graph has no inputs")
    if not g.outputs:
        raise GraphError("graph has no outputs")
    g.validate(input_shape)
    return g


def _expand_supernet(g: Graph, module_id: str, entry: Mapping[str, Any], seed: int):
    branches = entry.get("supernet_branches") or []
    if len(branches) < 2:
        raise GraphError(f"supernet module {module_id!r} needs at least two branches")
    entries: List[Optional[str]] = []
    tails: List[Optional[str]] = []
    built = []
    for b, branch in enumerate(branches):
        if isinstance(branch, Mapping):
            branch = branch.get("nodes", [])
        prev, first = None, None
        ids = []
        for j, sub in enumerate(branch):
            if sub.get("kind") == "Identity" and len(branch) == 1:
                break
            sid = f"{module_id}.b{b}.{sub.get('id', f'n{j}')}"
            node = _make_node(sub, sid, seed)
            node.annotations["supernet_branch"] = (module_id, b)
            built.append(node)
            ids.append(sid)
            if prev is not None:
                built.append((prev, sid))
            first = first or sid
            prev = sid
        entries.append(first)
        tails.append(prev)
    for item in built:
        if isinstance(item, Node):
            g.add_node(item)
        else:
            g.add_edge(item[0], item[1], 0)
    comb = Node(module_id, "SuperNetCombiner", {"branches": len(branches)})
    g.add_node(comb)
    for b, tail in enumerate(tails):
        if tail is not None:
            g.add_edge(tail, module_id, b)
    return entries


def _connect_module(g: Graph, src: str, module_id: str, entries: List[Optional[str]]) -> None:
    for b, first in enumerate(entries):
        if first is None:
            g.add_edge(src, module_id, b)
        else:
            g.add_edge(src, first, 0)


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------

def _normalize_input_shapes(g: Graph, input_shape) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    if isinstance(input_shape, Mapping):
        for k, v in input_shape.items():
            shapes[k] = tuple(int(x) for x in v)
    for nid in g.inputs:
        declared = tuple(g.nodes[nid].params["shape"])
        if nid in shapes:
            continue
        if input_shape is not None and not isinstance(input_shape, Mapping):
            given = tuple(int(x) for x in input_shape)
            shapes[nid] = given if len(given) == len(declared) + 1 else (1,) + given
        else:
            shapes[nid] = (1,) + declared
        if shapes[nid][1:] != declared:
            raise ShapeInferenceError(f"input {nid!r}: shape {shapes[nid][1:]} != declared {declared}")
    return shapes


def node_output_shape(g: Graph, nid: str, ins: Sequence[Tuple[int, ...]]) -> Tuple[int, ...]:
    node = g.nodes[nid]
    kind, p = node.kind, node.params
    preds = g.predecessors(nid)

    def fail(msg, slot=0):
        src = preds[slot] if slot < len(preds) else "?"
        raise ShapeInferenceError(f"edge {src}->{nid} (slot {slot}): {msg}")

    if kind in ("Output", "ReLU", "Identity"):
        return ins[0]
    if kind in CONV_KINDS:
        x = ins[0]
        if len(x) != 4:
            fail(f"{kind} expects a 4D input, got {list(x)}")
        cin = p["in_channels"] if kind == "Conv2d" else p["channels"]
        cout = p["out_channels"] if kind == "Conv2d" else p["channels"]
        if x[1] != cin:
            fail(f"{kind} {nid!r} expects {cin} input channels, got {x[1]}")
        geo = node.conv_geometry()
        ho = conv_output_size(x[2], geo["kernel_size"][0], geo["stride"][0], geo["padding"][0])
        wo = conv_output_size(x[3], geo["kernel_size"][1], geo["stride"][1], geo["padding"][1])
        if ho <= 0 or wo <= 0:
            fail(f"kernel larger than input {list(x)}")
        return (x[0], cout, ho, wo)
    if kind == "Linear":
        x = ins[0]
        if len(x) != 2 or x[1] != p["in_features"]:
            fail(f"Linear {nid!r} expects [N, {p['in_features']}], got {list(x)}")
        return (x[0], p["out_features"])
    if kind == "BatchNorm":
        x = ins[0]
        if len(x) not in (2, 4) or x[1] != p["num_features"]:
            fail(f"BatchNorm {nid!r} expects {p['num_features']} channels, got {list(x)}")
        return x
    if kind in ("MaxPool", "AvgPool"):
        x = ins[0]
        if len(x) != 4:
            fail(f"{kind} expects a 4D input, got {list(x)}")
        k = pair(p["kernel_size"])
        s = pair(p.get("stride") or p["kernel_size"])
        pad = pair(p.get("padding", 0))
        ho, wo = (conv_output_size(x[2 + i], k[i], s[i], pad[i]) for i in range(2))
        if ho <= 0 or wo <= 0:
            fail(f"pool window larger than input {list(x)}")
        return (x[0], x[1], ho, wo)
    if kind == "GlobalAvgPool":
        if len(ins[0]) != 4:
            fail(f"GlobalAvgPool expects a 4D input, got {list(ins[0])}")
        return ins[0][:2]
    if kind == "Flatten":
        return (ins[0][0], int(np.prod(ins[0][1:])))
    if kind in ("Add", "SuperNetCombiner"):
        for k, s in enumerate(ins[1:], start=1):
            if s != ins[0]:
                what = "supernet branch" if kind == "SuperNetCombiner" else "Add operand"
                fail(f"{what} shape {list(s)} differs from {list(ins[0])} (slot 0)", slot=k)
        return ins[0]
    if kind == "Concat":
        axis = p.get("axis", 1)
        base = list(ins[0])
        if not 0 < axis < len(base):
            fail(f"concat axis {axis} out of range for rank {len(base)}")
        total = 0
        for k, s in enumerate(ins):
            if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis):
                fail(f"Concat operand {list(s)} incompatible with {base}", slot=k)
            total += s[axis]
        base[axis] = total
        return tuple(base)
    raise ShapeInferenceError(f"no shape rule for kind {kind}")


def infer_shapes(g: Graph, input_shape=None) -> Dict[str, Tuple[int, ...]]:
    """Static output shape (batch included) of every node."""
    shapes = _normalize_input_shapes(g, input_shape)
    for nid in g.topological_order():
        if g.nodes[nid].kind == "Input":
            continue
        ins = [shapes[s] for s in g.predecessors(nid)]
        shapes[nid] = node_output_shape(g, nid, ins)
    return shapes


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def graph_to_dict(g: Graph) -> Dict[str, Any]:
    nodes = []
    for nid in g.nodes:
        node = g.nodes[nid]
        if node.kind == "Input":
            continue
        entry: Dict[str, Any] = {"id": nid, "kind": node.kind, "params": _jsonable(node.params)}
        record = node.annotations.get("folded_bn")
        if record is not None:
            entry["annotations"] = {"folded_bn": {"eps": float(record["eps"]),
                                                  "bn_id": record.get("bn_id")}}
        nodes.append(entry)
    return {
        "inputs": [{"id": i, "shape": list(g.nodes[i].params["shape"]),
                    "params": {k: v for k, v in _jsonable(g.nodes[i].params).items() if k != "shape"}}
                   for i in g.inputs],
        "nodes": nodes,
        "edges": [list(e) for e in g.edges],
        "outputs": list(g.outputs),
    }


def graph_from_dict(desc: Mapping[str, Any], state: Optional[Mapping[str, np.ndarray]] = None) -> Graph:
    desc = dict(desc)
    desc.setdefault("edges", [])
    g = build_graph(desc)
    if state is not None:
        g.load_state_dict(state)
    return g


def save_graph(g: Graph, directory: Union[str, Path], extra_state: Optional[Mapping] = None) -> Path:
    """Write ``graph.json`` and ``weights.dnft`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "graph.json").write_text(json.dumps(graph_to_dict(g), indent=1))
    state = g.state_dict()
    if extra_state:
        state.update(extra_state)
    checkpoint.save(directory / "weights.dnft", state)
    return directory


def load_graph(directory: Union[str, Path]) -> Graph:
    directory = Path(directory)
    desc = json.loads((directory / "graph.json").read_text())
    state = checkpoint.load(directory / "weights.dnft")
    ids = {n["id"] for n in desc["nodes"]}
    own = {k: v for k, v in state.items() if split_state_key(k)[0] in ids}
    return graph_from_dict(desc, own)


def split_state_key(key: str) -> Tuple[str, str]:
    """Split ``"<node id>.<weight name>"``; node ids may themselves contain dots."""
    if ".folded_bn." in key:
        nid, _, field_name = key.rpartition(".folded_bn.")
        return nid, "folded_bn." + field_name
    nid, _, name = key.rpartition(".")
    return nid, name


def iter_weight_arrays(g: Graph) -> Iterable[Tuple[str, str, np.ndarray]]:
    for nid in g.topological_order():
        for name, t in g.nodes[nid].weights.items():
            if name not in BUFFERS:
                yield nid, name, t.data

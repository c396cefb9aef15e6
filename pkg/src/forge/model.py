"""Common interface of trainable models, with or without an attached search."""
from __future__ import annotations

from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .cost import CostSpec, get_cost, resolve_spec
from .executor import Runtime, execute
from .graph import Graph, GraphError, infer_shapes
from .functional import pair
from .passes import cleanup
from .tensor import Tensor

CostArg = Union[str, CostSpec, Mapping]


def static_bag(g: Graph, nid: str, shapes: Mapping[str, Tuple[int, ...]]) -> Dict[str, Any]:
    """Parameter bag of ``nid`` with static (exported) values."""
    node = g.nodes[nid]
    p = node.params
    bag: Dict[str, Any] = {"kind": node.kind, "node_id": nid, "out_shape": shapes[nid]}
    preds = g.predecessors(nid)
    if preds:
        bag["in_shape"] = shapes[preds[0]]
    if node.kind in ("Conv2d", "DepthwiseConv2d"):
        geo = node.conv_geometry()
        xin, xout = shapes[preds[0]], shapes[nid]
        bag.update(kernel_size=geo["kernel_size"], stride=geo["stride"], padding=geo["padding"],
                   groups=geo["groups"], in_channels=xin[1], out_channels=xout[1],
                   in_height=xin[2], in_width=xin[3], out_height=xout[2], out_width=xout[3],
                   bias=bool(p.get("bias")))
    elif node.kind == "Linear":
        bag.update(in_features=p["in_features"], out_features=p["out_features"],
                   bias=bool(p.get("bias")))
    elif node.kind in ("MaxPool", "AvgPool"):
        bag.update(kernel_size=pair(p["kernel_size"]))
    if len(bag["out_shape"]) > 1:
        bag.setdefault("channels", bag["out_shape"][1])
    wbits = p.get("weight_bits")
    bag["weight_bits"] = float(wbits) if wbits is not None else 32.0
    bbits = p.get("bias_bits")
    bag["bias_bits"] = float(bbits) if bbits is not None else bag["weight_bits"]
    quant = p.get("input_quant")
    bag["in_bits"] = float(quant["bits"]) if quant else 32.0
    bag["out_bits"] = 32.0
    return bag


def _resolve_costs(costs) -> Dict[str, CostSpec]:
    if costs is None:
        costs = ("params",)
    if isinstance(costs, (str, CostSpec)):
        costs = (costs,)
    if isinstance(costs, Mapping) and "rules" not in costs:
        return {name: resolve_spec(s) for name, s in costs.items()}
    if isinstance(costs, Mapping):
        costs = (costs,)
    out = {}
    for c in costs:
        spec = resolve_spec(c)
        out[spec.name] = spec
    return out


class SearchModel(Runtime):
    """A graph plus evaluation hooks, trainable weights and architecture state.

    The plain model (no search attached) is this class itself; the search
    methods subclass it and override the runtime hooks, the cost bags and
    :meth:`export`.

    :param graph: the graph to train; the plain model trains it in place
    :param costs: cost specifications reachable through :meth:`get_cost`
    """

    method: Optional[str] = None

    def __init__(self, graph: Graph, costs: Optional[Union[CostArg, Sequence[CostArg]]] = None):
        self.graph = graph
        self.shapes = infer_shapes(graph)
        self.cost_specs = _resolve_costs(costs)

    # -- execution ---------------------------------------------------------
    def forward(self, x, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
        return execute(self.graph, x, mode=mode, rng=rng, runtime=self)[0]

    __call__ = forward

    def parameters(self) -> List[Tensor]:
        return self.graph.parameters()

    def arch_parameters(self) -> List[Tensor]:
        return []

    def set_progress(self, fraction: float) -> None:
        """Called by the trainer with the fraction of the schedule completed."""

    # -- costs -------------------------------------------------------------
    def cost_bag(self, nid: str, context: Any = None) -> Dict[str, Any]:
        return static_bag(self.graph, nid, self.shapes)

    def cost_context(self) -> Any:
        return None

    def cost_weight(self, nid: str, context: Any = None):
        return 1.0

    def cost_entries(self) -> Iterable[Tuple[str, str, Mapping, Dict[str, Any], Any]]:
        ctx = self.cost_context()
        for nid in self.graph.topological_order():
            node = self.graph.nodes[nid]
            yield nid, node.kind, node.params, self.cost_bag(nid, ctx), self.cost_weight(nid, ctx)

    def get_cost(self, name: Optional[CostArg] = None) -> Tensor:
        if name is None:
            if len(self.cost_specs) != 1:
                raise ValueError(f"several costs are attached {sorted(self.cost_specs)}; name one")
            spec = next(iter(self.cost_specs.values()))
        elif isinstance(name, str) and name in self.cost_specs:
            spec = self.cost_specs[name]
        else:
            spec = resolve_spec(name)
        return get_cost(self, spec)

    def get_costs(self) -> Dict[str, Tensor]:
        return {name: get_cost(self, spec) for name, spec in self.cost_specs.items()}

    # -- search state ------------------------------------------------------
    def arch_state(self) -> Dict[str, np.ndarray]:
        return {}

    def load_arch_state(self, state: Mapping[str, np.ndarray]) -> None:
        own = self.arch_state()
        for key, value in state.items():
            if key not in own:
                continue
            target = self._arch_tensor(key)
            if target.shape != tuple(np.shape(value)):
                raise GraphError(f"arch entry {key!r}: shape {np.shape(value)} != {target.shape}")
            target.data = np.array(value, dtype=target.dtype)

    def _arch_tensor(self, key: str) -> Tensor:
        raise KeyError(key)

    def export(self) -> Graph:
        return cleanup(self.graph.copy())

    def report(self) -> Dict[str, Any]:
        return {"method": self.method}


def as_model(obj) -> SearchModel:
    if isinstance(obj, SearchModel):
        return obj
    if isinstance(obj, Graph):
        return SearchModel(obj)
    raise TypeError(f"expected a Graph or SearchModel, got {type(obj).__name__}")


def reject_stacking(g: Graph, method: str) -> None:
    """Search methods compose by exporting, never by stacking on a search graph."""
    for nid, node in g.nodes.items():
        if node.kind == "SuperNetCombiner":
            raise GraphError(f"cannot attach {method} to a graph with supernet combiner {nid!r}; "
                             "export the supernet first")
        if "weight_bits" in node.params or "input_quant" in node.params:
            raise GraphError(f"cannot attach {method} to an MPS-converted graph (node {nid!r} "
                             "has fixed precision)")

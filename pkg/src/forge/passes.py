"""Graph-rewriting passes used by the search methods.

The channel analysis at the heart of this module tracks, for every node, the
*layout* of its output channels: an ordered list of segments, each owned by a
channel-defining entity (a conv/linear layer or a graph input) and optionally
scaled by a multiplier (a flatten turns each channel into ``H*W`` features).
Add junctions merge the entities of their operands; concat junctions append
their operand layouts.
"""
from __future__ import annotations

import fnmatch
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .graph import BUFFERS, KINDS, TARGET_KINDS, Graph, GraphError, Node, infer_shapes
from .tensor import Tensor


class StructuralError(GraphError):
    """The graph cannot be converted consistently (e.g. mismatched mask group)."""


class PassWarning(UserWarning):
    pass


TRANSPARENT_KINDS = ("ReLU", "BatchNorm", "MaxPool", "AvgPool", "GlobalAvgPool", "Identity",
                     "Output")


# ---------------------------------------------------------------------------
# target identification
# ---------------------------------------------------------------------------

def _rule_matches(rule: str, node: Node) -> bool:
    if rule in KINDS:
        return node.kind == rule
    return fnmatch.fnmatchcase(node.id, rule)


def identify_targets(g: Graph, exclude: Iterable[str] = ()) -> List[str]:
    """Conv/DW-conv/linear node ids not matched by an exclusion rule.

    A rule is either a node kind (``"Linear"``) or a glob on node ids
    (``"stem*"``). Rules that match nothing produce a :class:`PassWarning`.
    """
    exclude = list(exclude)
    used = {rule: False for rule in exclude}
    targets = []
    for nid in g.topological_order():
        node = g.nodes[nid]
        if node.kind not in TARGET_KINDS:
            continue
        hits = [r for r in exclude if _rule_matches(r, node)]
        for r in hits:
            used[r] = True
        if not hits:
            targets.append(nid)
    for rule, hit in used.items():
        if not hit:
            warnings.warn(f"exclusion rule {rule!r} matched no layer", PassWarning, stacklevel=2)
    return targets


# ---------------------------------------------------------------------------
# channel layouts and mask groups
# ---------------------------------------------------------------------------

class _UnionFind:
    def __init__(self):
        self.parent: Dict[str, str] = {}

    def add(self, x: str) -> None:
        self.parent.setdefault(x, x)

    def find(self, x: str) -> str:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


@dataclass(frozen=True)
class Segment:
    entity: str
    size: int
    mult: int = 1


@dataclass
class ChannelAnalysis:
    layouts: Dict[str, List[Segment]]
    uf: _UnionFind
    entity_kind: Dict[str, str]          # "input" | "target" | "fixed"
    output_bound: set
    shapes: Dict[str, Tuple[int, ...]]

    def root(self, entity: str) -> str:
        return self.uf.find(entity)

    def input_layout(self, g: Graph, nid: str, slot: int = 0) -> List[Segment]:
        return self.layouts[g.predecessors(nid)[slot]]


def _merge_layouts(uf: _UnionFind, layouts: Sequence[List[Segment]], where: str) -> List[Segment]:
    first = layouts[0]
    for other in layouts[1:]:
        if [(s.size, s.mult) for s in other] != [(s.size, s.mult) for s in first]:
            raise StructuralError(f"{where}: operands have incompatible channel layouts "
                                  f"{[(s.size, s.mult) for s in first]} vs "
                                  f"{[(s.size, s.mult) for s in other]}")
        for a, b in zip(first, other):
            uf.union(a.entity, b.entity)
    return list(first)


def analyze_channels(g: Graph, targets: Sequence[str]) -> ChannelAnalysis:
    shapes = infer_shapes(g)
    uf = _UnionFind()
    layouts: Dict[str, List[Segment]] = {}
    entity_kind: Dict[str, str] = {}
    output_bound = set()
    targets = set(targets)
    for nid in g.topological_order():
        node = g.nodes[nid]
        preds = g.predecessors(nid)
        ins = [layouts[p] for p in preds]
        kind = node.kind
        if kind == "Input":
            uf.add(nid)
            entity_kind[nid] = "input"
            layouts[nid] = [Segment(nid, shapes[nid][1])]
        elif kind in ("Conv2d", "Linear"):
            uf.add(nid)
            entity_kind[nid] = "target" if nid in targets else "fixed"
            layouts[nid] = [Segment(nid, node.out_channels)]
            if kind == "Conv2d" and node.params.get("groups", 1) > 1 and nid in targets:
                raise StructuralError(f"grouped convolution {nid!r} (groups="
                                      f"{node.params['groups']}) cannot be channel-searched; "
                                      "exclude it")
        elif kind == "DepthwiseConv2d":
            if len(ins[0]) != 1 or ins[0][0].mult != 1:
                raise StructuralError(f"depthwise conv {nid!r} must follow a single "
                                      "channel-defining layer")
            if nid not in targets:
                # an excluded DW conv pins its predecessor's channels
                uf.add(nid)
                entity_kind[nid] = "fixed"
                uf.union(ins[0][0].entity, nid)
            layouts[nid] = list(ins[0])
        elif kind in TRANSPARENT_KINDS:
            layouts[nid] = list(ins[0])
            if kind == "Output":
                output_bound.update(s.entity for s in ins[0])
        elif kind == "Flatten":
            shape = shapes[preds[0]]
            k = int(np.prod(shape[2:])) if len(shape) > 2 else 1
            layouts[nid] = [Segment(s.entity, s.size, s.mult * k) for s in ins[0]]
        elif kind in ("Add", "SuperNetCombiner"):
            layouts[nid] = _merge_layouts(uf, ins, f"{kind} {nid!r}")
        elif kind == "Concat":
            if node.params.get("axis", 1) == 1:
                layouts[nid] = [s for lay in ins for s in lay]
            else:
                layouts[nid] = _merge_layouts(uf, ins, f"Concat {nid!r}")
        else:
            raise StructuralError(f"no channel rule for node kind {kind}")
    return ChannelAnalysis(layouts, uf, entity_kind, output_bound, shapes)


@dataclass
class MaskGroup:
    """Layers whose output-channel masks must coincide."""
    id: str
    members: List[str]
    size: int
    frozen: bool = False
    reason: Optional[str] = None
    root: str = ""
    theta: Optional[Tensor] = field(default=None, repr=False)


def share_masks(g: Graph, targets: Sequence[str],
                analysis: Optional[ChannelAnalysis] = None) -> List[MaskGroup]:
    """Group target layers that must share one channel mask.

    Depthwise convs join the group of their channel-defining predecessor; all
    producers feeding the same Add join one group; concat keeps operand groups
    apart. Groups tied to a graph input, an excluded layer, or a graph output
    are marked frozen (never pruned).
    """
    analysis = analysis or analyze_channels(g, targets)
    uf = analysis.uf
    by_root: Dict[str, List[str]] = {}
    for nid in targets:
        node = g.nodes[nid]
        if node.kind == "DepthwiseConv2d":
            entity = analysis.input_layout(g, nid)[0].entity
        else:
            entity = nid
        by_root.setdefault(uf.find(entity), []).append(nid)

    groups = []
    for i, (root, members) in enumerate(by_root.items()):
        sizes = {m: g.nodes[m].out_channels for m in members}
        if len(set(sizes.values())) != 1:
            raise StructuralError(f"mask group members have differing channel counts: {sizes}")
        kinds = {analysis.entity_kind[e] for e in uf.parent if uf.find(e) == root}
        reason = None
        if "input" in kinds:
            reason = "tied to a graph input"
        elif "fixed" in kinds:
            reason = "tied to an excluded layer"
        elif any(uf.find(e) == root for e in analysis.output_bound):
            reason = "feeds a graph output"
        groups.append(MaskGroup(f"g{i}", members, next(iter(sizes.values())),
                                frozen=reason is not None, reason=reason, root=root))
    return groups


def group_of(groups: Sequence[MaskGroup]) -> Dict[str, MaskGroup]:
    return {m: grp for grp in groups for m in grp.members}


# ---------------------------------------------------------------------------
# effective shape calculators
# ---------------------------------------------------------------------------

class ShapeCalculator:
    """Computes a node's effective channel (or feature) count.

    ``transform`` is one of ``"mask"`` (count of kept channels in a group),
    ``"constant"``, ``"multiply"`` (predecessor times ``factor``) or ``"sum"``
    (sum over predecessors, for concat).
    """

    def __init__(self, owner: str, transform: str, predecessors: Sequence["ShapeCalculator"] = (),
                 factor: int = 1, constant: int = 0, group: Optional[str] = None):
        self.owner = owner
        self.transform = transform
        self.predecessors = list(predecessors)
        self.factor = factor
        self.constant = constant
        self.group = group

    def static(self) -> int:
        return int(self.value(None))

    def value(self, counts: Optional[Mapping[str, Union[Tensor, float]]]):
        if self.transform == "mask":
            if counts is None or self.group not in counts:
                return float(self.constant)
            return counts[self.group]
        if self.transform == "constant":
            return float(self.constant)
        if self.transform == "multiply":
            return self.predecessors[0].value(counts) * self.factor
        if self.transform == "sum":
            total = self.predecessors[0].value(counts)
            for p in self.predecessors[1:]:
                total = total + p.value(counts)
            return total
        raise ValueError(f"unknown calculator transform {self.transform!r}")

    def __repr__(self) -> str:
        return f"ShapeCalculator({self.owner!r}, {self.transform!r})"


def attach_shape_calculators(g: Graph, groups: Sequence[MaskGroup],
                             analysis: Optional[ChannelAnalysis] = None) -> Graph:
    """Return a copy of ``g`` whose nodes carry channel calculators.

    Each node gets ``annotations["channel_pred"]`` (ids of its closest
    channel-defining predecessors) and ``annotations["shape_calc"]`` (the
    calculator of its output channels). Members of one mask group share one
    calculator object.
    """
    targets = [m for grp in groups for m in grp.members]
    analysis = analysis or analyze_channels(g, targets)
    uf = analysis.uf
    root_group = {grp.root: grp for grp in groups}
    out = g.copy()
    entity_calc: Dict[str, ShapeCalculator] = {}

    def calc_for_entity(entity: str, size: int) -> ShapeCalculator:
        root = uf.find(entity)
        if root not in entity_calc:
            grp = root_group.get(root)
            if grp is not None and not grp.frozen:
                entity_calc[root] = ShapeCalculator(grp.id, "mask", constant=size, group=grp.id)
            else:
                entity_calc[root] = ShapeCalculator(root, "constant", constant=size)
        return entity_calc[root]

    calcs: Dict[str, ShapeCalculator] = {}
    for nid in out.topological_order():
        node = out.nodes[nid]
        preds = out.predecessors(nid)
        layout = analysis.layouts[nid]
        if node.kind in ("Input", "Conv2d", "Linear"):
            calc = calc_for_entity(nid, layout[0].size)
        elif node.kind == "Flatten":
            prev = calcs[preds[0]]
            k = int(np.prod(analysis.shapes[preds[0]][2:]))
            calc = ShapeCalculator(nid, "multiply", [prev], factor=k) if k != 1 else prev
        elif node.kind == "Concat" and node.params.get("axis", 1) == 1:
            calc = ShapeCalculator(nid, "sum", [calcs[p] for p in preds])
        elif preds:
            calc = calcs[preds[0]]
        else:
            raise StructuralError(f"node {nid!r} has no predecessor to link its shape to")
        calcs[nid] = calc
        node.annotations["shape_calc"] = calc
        if preds:
            node.annotations["channel_pred"] = sorted({s.entity for p in preds
                                                       for s in analysis.layouts[p]})
    return out


def input_calculator(g: Graph, nid: str) -> ShapeCalculator:
    return g.nodes[g.predecessors(nid)[0]].annotations["shape_calc"]


# ---------------------------------------------------------------------------
# batch-norm folding
# ---------------------------------------------------------------------------

def fold_bn(g: Graph) -> Graph:
    """Fold every BatchNorm into the conv/linear layer that feeds it.

    The original BN parameters are kept in the layer's
    ``annotations["folded_bn"]`` so :func:`unfold_bn` can restore them. A BN
    without a foldable single-consumer predecessor is left in place with a
    :class:`PassWarning` and flagged ``annotations["unfoldable"]``.
    """
    out = g.copy()
    for nid in out.nodes_of_kind("BatchNorm"):
        bn = out.nodes[nid]
        pred = out.predecessors(nid)[0]
        prod = out.nodes[pred]
        if prod.kind not in TARGET_KINDS or len(out.successors(pred)) != 1 \
                or "folded_bn" in prod.annotations:
            warnings.warn(f"BatchNorm {nid!r} has no foldable predecessor; left in place",
                          PassWarning, stacklevel=2)
            bn.annotations["unfoldable"] = True
            continue
        gamma = bn.weights["weight"].data.astype(np.float64)
        beta = bn.weights["bias"].data.astype(np.float64)
        mean = bn.weights["running_mean"].data.astype(np.float64)
        var = bn.weights["running_var"].data.astype(np.float64)
        eps = float(bn.params["eps"])
        scale = gamma / np.sqrt(var + eps)
        w = prod.weights["weight"].data.astype(np.float64)
        had_bias = "bias" in prod.weights
        b = prod.weights["bias"].data.astype(np.float64) if had_bias else np.zeros_like(mean)
        w_new = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
        b_new = (b - mean) * scale + beta
        prod.weights["weight"] = Tensor(w_new.astype(np.float32), requires_grad=True)
        prod.weights["bias"] = Tensor(b_new.astype(np.float32), requires_grad=True)
        prod.params["bias"] = True
        prod.annotations["folded_bn"] = {
            "gamma": gamma.astype(np.float32), "beta": beta.astype(np.float32),
            "mean": mean.astype(np.float32), "var": var.astype(np.float32),
            "eps": eps, "bn_id": nid, "had_bias": had_bias, "momentum": bn.params["momentum"],
        }
        out.bypass(nid)
    return out


def unfold_bn(g: Graph) -> Graph:
    """Inverse of :func:`fold_bn` using the saved BN records."""
    out = g.copy()
    for nid in out.topological_order():
        node = out.nodes[nid]
        record = node.annotations.get("folded_bn")
        if record is None:
            continue
        gamma = np.asarray(record["gamma"], np.float64)
        beta = np.asarray(record["beta"], np.float64)
        mean = np.asarray(record["mean"], np.float64)
        var = np.asarray(record["var"], np.float64)
        eps = float(record["eps"])
        scale = gamma / np.sqrt(var + eps)
        if np.any(np.abs(scale) < 1e-12):
            warnings.warn(f"cannot unfold BN into {nid!r}: zero scale", PassWarning, stacklevel=2)
            continue
        w = node.weights["weight"].data.astype(np.float64)
        b = node.weights["bias"].data.astype(np.float64)
        node.weights["weight"] = Tensor(
            (w / scale.reshape((-1,) + (1,) * (w.ndim - 1))).astype(np.float32), requires_grad=True)
        node.weights["bias"] = Tensor(((b - beta) / scale + mean).astype(np.float32),
                                      requires_grad=True)
        bn_id = record.get("bn_id") or f"{nid}.bn"
        if bn_id in out.nodes:
            bn_id = f"{nid}.bn"
        c = len(gamma)
        bn = Node(bn_id, "BatchNorm", {"num_features": c, "eps": eps,
                                       "momentum": record.get("momentum", 0.1)})
        bn.weights = {
            "weight": Tensor(gamma.astype(np.float32), requires_grad=True),
            "bias": Tensor(beta.astype(np.float32), requires_grad=True),
            "running_mean": Tensor(mean.astype(np.float32)),
            "running_var": Tensor(var.astype(np.float32)),
        }
        consumers = out.successors(nid)
        out.add_node(bn)
        out.edges = [e for e in out.edges if e[0] != nid]
        out.add_edge(nid, bn_id, 0)
        for dst, slot in consumers:
            out.add_edge(bn_id, dst, slot)
        del node.annotations["folded_bn"]
    return out


# ---------------------------------------------------------------------------
# export helpers
# ---------------------------------------------------------------------------

def supernet_branches(g: Graph, combiner: str) -> List[List[str]]:
    """Node ids of each branch feeding ``combiner`` (empty list = identity path)."""
    producers = g.predecessors(combiner)
    closures = [g.ancestors(p) | {p} for p in producers]
    common = set.intersection(*closures)
    order = {nid: i for i, nid in enumerate(g.topological_order())}
    return [sorted(c - common, key=order.get) for c in closures]


def cleanup(g: Graph) -> Graph:
    """Drop Identity nodes and anything that no longer reaches an output."""
    for nid in list(g.nodes):
        if g.nodes[nid].kind == "Identity":
            g.bypass(nid)
    live = set(g.outputs)
    for o in g.outputs:
        live |= g.ancestors(o)
    for nid in list(g.nodes):
        if nid not in live and g.nodes[nid].kind != "Input":
            g.remove_node(nid)
    return g


def export_supernet(g: Graph, selection: Mapping[str, int]) -> Graph:
    """Replace each combiner by its selected branch."""
    out = g.copy()
    for comb in [n for n in g.topological_order() if g.nodes[n].kind == "SuperNetCombiner"]:
        if comb not in out.nodes:
            continue
        idx = int(selection[comb])
        branches = supernet_branches(out, comb)
        producer = out.predecessors(comb)[idx]
        for b, nodes in enumerate(branches):
            if b != idx:
                for nid in nodes:
                    if nid in out.nodes and nid not in branches[idx]:
                        out.remove_node(nid)
        consumers = out.successors(comb)
        out.remove_node(comb)
        for dst, slot in consumers:
            out.add_edge(producer, dst, slot)
        for nid in branches[idx]:
            out.nodes[nid].annotations.pop("supernet_branch", None)
    return cleanup(out)


def _layout_keep(layout: Sequence[Segment], keep: Mapping[str, np.ndarray],
                 uf: _UnionFind) -> np.ndarray:
    idx, offset = [], 0
    for seg in layout:
        kept = keep.get(uf.find(seg.entity))
        channels = np.arange(seg.size) if kept is None else np.flatnonzero(kept)
        for c in channels:
            start = offset + c * seg.mult
            idx.extend(range(start, start + seg.mult))
        offset += seg.size * seg.mult
    return np.asarray(idx, dtype=np.int64)


def keep_alive(binary: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Never empty a group: keep the channel with the largest logit."""
    binary = np.asarray(binary, dtype=bool).copy()
    if not binary.any():
        binary[int(np.argmax(theta))] = True
    return binary


def export_pit(g: Graph, groups: Sequence[MaskGroup], keep: Mapping[str, np.ndarray],
               unfold: bool = False) -> Tuple[Graph, Dict[str, Dict[str, int]]]:
    """Physically remove masked channels.

    :param keep: boolean keep-vector per mask-group id (frozen groups may be
        omitted and are kept whole)
    :return: the pruned graph and a per-layer ``{"kept", "total"}`` summary
    """
    targets = [m for grp in groups for m in grp.members]
    analysis = analyze_channels(g, targets)
    uf = analysis.uf
    by_root = {grp.root: np.asarray(keep[grp.id], bool)
               for grp in groups if not grp.frozen and grp.id in keep}
    out = g.copy()
    summary: Dict[str, Dict[str, int]] = {}
    for nid in out.topological_order():
        node = out.nodes[nid]
        if node.kind not in ("Conv2d", "DepthwiseConv2d", "Linear", "BatchNorm"):
            continue
        out_idx = _layout_keep(analysis.layouts[nid], by_root, uf)
        in_idx = _layout_keep(analysis.input_layout(g, nid), by_root, uf)
        total = node.out_channels
        w = node.weights
        if node.kind == "BatchNorm":
            for name in list(w):
                w[name] = Tensor(w[name].data[out_idx], requires_grad=name not in BUFFERS)
            node.params["num_features"] = len(out_idx)
        elif node.kind == "DepthwiseConv2d":
            w["weight"] = Tensor(w["weight"].data[out_idx], requires_grad=True)
            node.params["channels"] = len(out_idx)
        else:
            w["weight"] = Tensor(w["weight"].data[out_idx][:, in_idx], requires_grad=True)
            if node.kind == "Conv2d":
                node.params["out_channels"] = len(out_idx)
                node.params["in_channels"] = len(in_idx)
            else:
                node.params["out_features"] = len(out_idx)
                node.params["in_features"] = len(in_idx)
        if "bias" in w and node.kind != "BatchNorm":
            w["bias"] = Tensor(w["bias"].data[out_idx], requires_grad=True)
        record = node.annotations.get("folded_bn")
        if record is not None:
            record = dict(record)
            for key in ("gamma", "beta", "mean", "var"):
                record[key] = np.asarray(record[key])[out_idx]
            node.annotations["folded_bn"] = record
        for key in ("shape_calc", "channel_pred"):
            node.annotations.pop(key, None)
        if node.kind != "BatchNorm":
            summary[nid] = {"kept": int(len(out_idx)), "total": int(total)}
    for node in out.nodes.values():
        node.annotations.pop("shape_calc", None)
        node.annotations.pop("channel_pred", None)
    if unfold:
        out = unfold_bn(out)
    return cleanup(out), summary


def export_mps(g: Graph, weight_bits: Mapping[str, int],
               input_quant: Mapping[str, Mapping[str, float]]) -> Graph:
    """Fix every searched tensor at its selected precision.

    :param weight_bits: node id -> weight bit-width
    :param input_quant: node id -> ``{"bits", "alpha", "signed"}`` of its input quantizer
    """
    out = g.copy()
    for nid, bits in weight_bits.items():
        node = out.nodes[nid]
        node.params["weight_bits"] = int(bits)
        if "bias" in node.weights:
            node.params["bias_bits"] = max(int(bits), 8)
    for nid, spec in input_quant.items():
        out.nodes[nid].params["input_quant"] = {"bits": int(spec["bits"]),
                                                "alpha": float(spec["alpha"]),
                                                "signed": bool(spec.get("signed", False))}
    return cleanup(out)


def export(g: Graph, supernet: Optional[Mapping[str, int]] = None,
           pit: Optional[Tuple[Sequence[MaskGroup], Mapping[str, np.ndarray]]] = None,
           mps: Optional[Tuple[Mapping[str, int], Mapping[str, Mapping]]] = None,
           unfold: bool = False) -> Graph:
    """Turn a search-time graph into a plain graph given finalized choices."""
    out = g
    if supernet is not None:
        out = export_supernet(out, supernet)
    if pit is not None:
        out, _ = export_pit(out, pit[0], pit[1], unfold=unfold)
    if mps is not None:
        out = export_mps(out, mps[0], mps[1])
    if supernet is None and pit is None and mps is None:
        out = cleanup(out.copy())
    return out


def pass_report(groups: Sequence[MaskGroup] = (), g: Optional[Graph] = None,
                summary: Optional[Mapping[str, Mapping[str, int]]] = None) -> Dict:
    """JSON-ready description of mask groups, folded BNs and removed channels."""
    report: Dict = {"groups": [{"id": grp.id, "members": list(grp.members), "size": grp.size,
                                "frozen": grp.frozen, "reason": grp.reason} for grp in groups]}
    if g is not None:
        report["folded_bn"] = {nid: n.annotations["folded_bn"].get("bn_id")
                               for nid, n in g.nodes.items() if "folded_bn" in n.annotations}
    if summary is not None:
        report["channels"] = {nid: dict(v, removed=v["total"] - v["kept"])
                              for nid, v in summary.items()}
    return report

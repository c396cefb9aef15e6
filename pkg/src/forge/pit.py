"""Mask-based channel search: trainable output-channel masks with STE."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .graph import TARGET_KINDS, Graph, GraphError, Node
from .model import SearchModel, reject_stacking, static_bag
from .passes import (MaskGroup, analyze_channels, attach_shape_calculators, export_pit, fold_bn,
                     group_of, identify_targets, input_calculator, keep_alive, pass_report,
                     share_masks)
from .quant import heaviside_ste
from .tensor import Tensor


@dataclass
class ChannelMask:
    group: str
    theta: Tensor
    threshold: float = 0.5

    @property
    def size(self) -> int:
        return self.theta.shape[0]

    def binary(self) -> Tensor:
        return heaviside_ste(self.theta, self.threshold)

    def kept(self) -> np.ndarray:
        return self.theta.data >= self.threshold


def masked_weight(w: Tensor, mask: Union[ChannelMask, Tensor]) -> Tensor:
    """Multiply each output channel (axis 0) of ``w`` by its binarized mask."""
    h = mask.binary() if isinstance(mask, ChannelMask) else mask
    if w.shape[0] != h.shape[0]:
        raise ValueError(f"mask of {h.shape[0]} channels applied to a tensor with "
                         f"{w.shape[0]} output channels")
    return w * h.reshape((-1,) + (1,) * (w.ndim - 1))


def effective_channel_count(mask: ChannelMask) -> Tensor:
    """Number of kept channels, differentiable through the STE."""
    return mask.binary().sum()


class PIT(SearchModel):
    """Channel search over a plain graph.

    Construction runs the conversion passes (BN folding, target
    identification, mask sharing, shape calculators) on a copy of ``graph``.

    :param exclude: kind names or node-id globs left untouched
    :param threshold: binarization threshold of the mask logits
    :param init: initial value of every mask logit
    """

    method = "pit"

    def __init__(self, graph: Graph, costs=None, exclude: Sequence[str] = (),
                 threshold: float = 0.5, init: float = 1.0):
        reject_stacking(graph, self.method)
        g = fold_bn(graph)
        targets = identify_targets(g, exclude)
        analysis = analyze_channels(g, targets)
        groups = share_masks(g, targets, analysis)
        g = attach_shape_calculators(g, groups, analysis)
        self._setup(g, groups, costs, threshold, init)

    @classmethod
    def from_converted(cls, g: Graph, groups: Sequence[MaskGroup], costs=None,
                       threshold: float = 0.5, init: float = 1.0) -> "PIT":
        self = cls.__new__(cls)
        self._setup(g, groups, costs, threshold, init)
        return self

    def _setup(self, g: Graph, groups: Sequence[MaskGroup], costs, threshold, init) -> None:
        super().__init__(g, costs)
        self.groups = list(groups)
        self.group_of = group_of(self.groups)
        self.masks: Dict[str, ChannelMask] = {}
        self.last_summary: Optional[Dict[str, Dict[str, int]]] = None
        for grp in self.groups:
            if not grp.members:
                raise GraphError(f"mask group {grp.id!r} has no members")
            if grp.frozen:
                continue
            theta = Tensor(np.full(grp.size, float(init)), requires_grad=True,
                           name=f"pit.{grp.id}.theta")
            grp.theta = theta
            self.masks[grp.id] = ChannelMask(grp.id, theta, threshold)

    # -- runtime hooks -----------------------------------------------------
    def _mask_for(self, nid: str) -> Optional[ChannelMask]:
        grp = self.group_of.get(nid)
        return self.masks.get(grp.id) if grp is not None else None

    def weights(self, node: Node, mode: str) -> Dict[str, Tensor]:
        w = dict(node.weights)
        mask = self._mask_for(node.id)
        if mask is not None:
            h = mask.binary()
            w["weight"] = masked_weight(w["weight"], h)
            if "bias" in w:
                w["bias"] = masked_weight(w["bias"], h)
        return w

    def arch_parameters(self) -> List[Tensor]:
        return [m.theta for m in self.masks.values()]

    # -- costs -------------------------------------------------------------
    def cost_context(self):
        return {gid: effective_channel_count(m) for gid, m in self.masks.items()}

    def cost_bag(self, nid: str, context: Any = None) -> Dict[str, Any]:
        bag = static_bag(self.graph, nid, self.shapes)
        node = self.graph.nodes[nid]
        calc = node.annotations.get("shape_calc")
        if calc is None:
            return bag
        out = calc.value(context)
        bag["channels"] = out
        if node.kind in TARGET_KINDS:
            cin = input_calculator(self.graph, nid).value(context)
            if node.kind == "Linear":
                bag["in_features"], bag["out_features"] = cin, out
            else:
                bag["in_channels"], bag["out_channels"] = cin, out
                if node.kind == "DepthwiseConv2d":
                    bag["groups"] = out
        return bag

    def effective_channels(self) -> Dict[str, int]:
        """Effective output channels of every target layer at the current masks."""
        counts = {gid: float(k.sum()) for gid, k in self.keep_vectors().items()}
        return {nid: int(self.graph.nodes[nid].annotations["shape_calc"].value(counts))
                for grp in self.groups for nid in grp.members}

    # -- results -----------------------------------------------------------
    def keep_vectors(self) -> Dict[str, np.ndarray]:
        return {gid: keep_alive(m.kept(), m.theta.data) for gid, m in self.masks.items()}

    def export(self, unfold: bool = False) -> Graph:
        out, self.last_summary = export_pit(self.graph, self.groups, self.keep_vectors(),
                                            unfold=unfold)
        return out

    def arch_state(self) -> Dict[str, np.ndarray]:
        return {f"pit.{gid}.theta": m.theta.data for gid, m in self.masks.items()}

    def _arch_tensor(self, key: str) -> Tensor:
        return self.masks[key[len("pit."):-len(".theta")]].theta

    def report(self) -> Dict[str, Any]:
        rep = pass_report(self.groups, self.graph, self.last_summary)
        rep["method"] = self.method
        return rep


def attach(g: Graph, groups: Sequence[MaskGroup], costs=None, threshold: float = 0.5,
           init: float = 1.0) -> PIT:
    """Attach channel masks to a graph on which the conversion passes already ran."""
    reject_stacking(g, PIT.method)
    for nid, node in g.nodes.items():
        if node.kind == "BatchNorm" and not node.annotations.get("unfoldable"):
            raise GraphError(f"BatchNorm {nid!r} is not folded; run passes.fold_bn first")
    for nid, node in g.nodes.items():
        if "shape_calc" not in node.annotations:
            raise GraphError(f"node {nid!r} has no shape calculator; "
                             "run passes.attach_shape_calculators first")
    return PIT.from_converted(g, groups, costs, threshold, init)

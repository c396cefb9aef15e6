"""Mixed-precision search: softmax-weighted fake-quantized variants per tensor."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .functional import softmax
from .graph import TARGET_KINDS, Graph, GraphError, Node
from .model import SearchModel, reject_stacking, static_bag
from .passes import _UnionFind, export_mps, fold_bn, identify_targets
from .quant import fake_quant_act_pact, fake_quant_weight_minmax, minmax_scale
from .tensor import Tensor

DEFAULT_PRECISIONS = (2, 4, 8)
BIAS_MIN_BITS = 8
# kinds whose output carries the same values (or a subset) as their input
_PASS_THROUGH = ("ReLU", "MaxPool", "AvgPool", "GlobalAvgPool", "Flatten", "Identity", "Output")


@dataclass
class PrecisionChoice:
    """Trainable choice among bit-widths for one tensor (or shared group).

    :param owner: ``"<node id>.weight"`` or ``"<producer id>.act"``
    :param role: ``"weight"`` (min-max quantizer) or ``"activation"`` (PACT)
    """
    owner: str
    role: str
    precisions: Tuple[int, ...]
    theta: Tensor
    alpha: Optional[Tensor] = None
    signed: bool = False
    members: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.precisions:
            raise ValueError(f"precision choice {self.owner!r} has an empty bit-width set")
        if self.theta.shape != (len(self.precisions),):
            raise ValueError(f"precision choice {self.owner!r}: {self.theta.shape[0]} logits for "
                             f"{len(self.precisions)} bit-widths")

    def probabilities(self) -> Tensor:
        return softmax(self.theta)

    def quantize(self, t: Tensor, bits: int) -> Tensor:
        if self.role == "weight":
            return fake_quant_weight_minmax(t, bits)
        return fake_quant_act_pact(t, bits, self.alpha, signed=self.signed)


def effective_tensor(t: Tensor, choice: PrecisionChoice, bits_of=None) -> Tensor:
    """``sum_p softmax(theta)_p * Q_p(t)`` over the choice's bit-widths.

    :param bits_of: optional map applied to each bit-width before quantizing
        (used for biases, which never go below 8 bits)
    """
    probs = choice.probabilities()
    out = None
    for i, p in enumerate(choice.precisions):
        q = choice.quantize(t, bits_of(p) if bits_of else p) * probs[i]
        out = q if out is None else out + q
    return out


def effective_bitwidth(choice: PrecisionChoice, bits_of=None) -> Tensor:
    probs = choice.probabilities()
    values = np.array([bits_of(p) if bits_of else p for p in choice.precisions],
                      dtype=probs.dtype)
    return (probs * values).sum()


def _bias_bits(p: int) -> int:
    return max(int(p), BIAS_MIN_BITS)


def finalize(choice: PrecisionChoice) -> Tuple[int, Dict[str, Any]]:
    """Selected bit-width (argmax, ties to the larger width) and frozen quantizer."""
    theta = choice.theta.data
    best = max(range(len(theta)), key=lambda i: (theta[i], choice.precisions[i]))
    bits = int(choice.precisions[best])
    frozen: Dict[str, Any] = {"bits": bits}
    if choice.role == "activation":
        frozen.update(alpha=float(choice.alpha.data.reshape(-1)[0]), signed=choice.signed)
    return bits, frozen


class MPS(SearchModel):
    """Mixed-precision search over a plain graph.

    Each target layer gets a weight :class:`PrecisionChoice`; each activation
    feeding a target gets an activation choice shared by every layer that
    reads values from the same producers (operands of an Add are merged).

    :param precisions: candidate bit-widths for weights and activations
    :param exclude: kind names or node-id globs kept at full precision
    :param alpha_init: initial PACT clipping level
    """

    method = "mps"

    def __init__(self, graph: Graph, costs=None, precisions: Sequence[int] = DEFAULT_PRECISIONS,
                 exclude: Sequence[str] = (), alpha_init: float = 8.0):
        reject_stacking(graph, self.method)
        self._setup(fold_bn(graph), costs, precisions, exclude, alpha_init)

    def _setup(self, g: Graph, costs, precisions, exclude, alpha_init) -> None:
        super().__init__(g, costs)
        self.precisions = tuple(int(p) for p in precisions)
        if not self.precisions:
            raise ValueError("empty bit-width set")
        if any(p < 2 for p in self.precisions):
            raise ValueError(f"bit-widths must be >= 2, got {self.precisions}")
        self.targets = identify_targets(g, exclude)
        self.weight_choice: Dict[str, PrecisionChoice] = {}
        for nid in self.targets:
            self.weight_choice[nid] = PrecisionChoice(
                f"{nid}.weight", "weight", self.precisions,
                Tensor(np.zeros(len(self.precisions)), requires_grad=True,
                       name=f"mps.{nid}.weight.theta"), members=[nid])
        self.act_choice: Dict[str, PrecisionChoice] = {}
        self.producer_choice: Dict[str, PrecisionChoice] = {}
        uf = _UnionFind()
        reads: Dict[str, List[str]] = {}
        for nid in self.targets:
            prods = self._producers(g.predecessors(nid)[0])
            reads[nid] = prods
            for p in prods:
                uf.add(p)
            for p in prods[1:]:
                uf.union(prods[0], p)
        by_root: Dict[str, PrecisionChoice] = {}
        for nid in self.targets:
            root = uf.find(reads[nid][0])
            choice = by_root.get(root)
            if choice is None:
                choice = PrecisionChoice(
                    f"{root}.act", "activation", self.precisions,
                    Tensor(np.zeros(len(self.precisions)), requires_grad=True,
                           name=f"mps.{root}.act.theta"),
                    alpha=Tensor(np.asarray(float(alpha_init)), requires_grad=True,
                                 name=f"mps.{root}.act.alpha"))
                by_root[root] = choice
            choice.members.append(nid)
            choice.signed = choice.signed or self._signed(g.predecessors(nid)[0])
            self.act_choice[nid] = choice
            for p in reads[nid]:
                self.producer_choice[p] = choice

    def _producers(self, nid: str) -> List[str]:
        node = self.graph.nodes[nid]
        if node.kind in _PASS_THROUGH or node.kind in ("Add", "Concat"):
            out: List[str] = []
            for p in self.graph.predecessors(nid):
                out.extend(x for x in self._producers(p) if x not in out)
            return out
        return [nid]

    def _signed(self, nid: str) -> bool:
        node = self.graph.nodes[nid]
        if node.kind == "ReLU":
            return False
        if node.kind == "Input":
            return not node.params.get("nonnegative", True)
        if node.kind in _PASS_THROUGH:
            return self._signed(self.graph.predecessors(nid)[0])
        if node.kind in ("Add", "Concat"):
            return any(self._signed(p) for p in self.graph.predecessors(nid))
        return True

    def choices(self) -> List[PrecisionChoice]:
        seen, out = set(), []
        for c in list(self.weight_choice.values()) + list(self.act_choice.values()):
            if id(c) not in seen:
                seen.add(id(c))
                out.append(c)
        return out

    # -- runtime hooks -----------------------------------------------------
    def weights(self, node: Node, mode: str) -> Dict[str, Tensor]:
        w = dict(node.weights)
        choice = self.weight_choice.get(node.id)
        if choice is not None:
            w["weight"] = effective_tensor(w["weight"], choice)
            if "bias" in w:
                w["bias"] = effective_tensor(w["bias"], choice, _bias_bits)
        return w

    def node_input(self, node: Node, x: Tensor, mode: str) -> Tensor:
        choice = self.act_choice.get(node.id)
        return x if choice is None else effective_tensor(x, choice)

    def arch_parameters(self) -> List[Tensor]:
        out = []
        for c in self.choices():
            out.append(c.theta)
            if c.alpha is not None:
                out.append(c.alpha)
        return out

    # -- costs -------------------------------------------------------------
    def cost_context(self):
        return {id(c): effective_bitwidth(c) for c in self.choices()}

    def cost_bag(self, nid: str, context: Any = None) -> Dict[str, Any]:
        bag = static_bag(self.graph, nid, self.shapes)
        wc = self.weight_choice.get(nid)
        if wc is not None:
            bag["weight_bits"] = context[id(wc)]
            bag["bias_bits"] = effective_bitwidth(wc, _bias_bits)
        ac = self.act_choice.get(nid)
        if ac is not None:
            bag["in_bits"] = context[id(ac)]
        pc = self.producer_choice.get(nid)
        if pc is not None:
            bag["out_bits"] = context[id(pc)]
        return bag

    # -- results -----------------------------------------------------------
    def selection(self) -> Tuple[Dict[str, int], Dict[str, Dict[str, Any]]]:
        wbits = {nid: finalize(c)[0] for nid, c in self.weight_choice.items()}
        iq = {nid: finalize(c)[1] for nid, c in self.act_choice.items()}
        return wbits, iq

    def export(self) -> Graph:
        wbits, iq = self.selection()
        return export_mps(self.graph, wbits, iq)

    def arch_state(self) -> Dict[str, np.ndarray]:
        out = {}
        for c in self.choices():
            out[f"mps.{c.owner}.theta"] = c.theta.data
            if c.alpha is not None:
                out[f"mps.{c.owner}.alpha"] = c.alpha.data
        return out

    def _arch_tensor(self, key: str) -> Tensor:
        for c in self.choices():
            if key == f"mps.{c.owner}.theta":
                return c.theta
            if key == f"mps.{c.owner}.alpha":
                return c.alpha
        raise KeyError(key)

    def report(self) -> Dict[str, Any]:
        """Chosen bit-width, clipping level and scale of every searched tensor."""
        tensors = {}
        for nid, c in self.weight_choice.items():
            bits, _ = finalize(c)
            w = self.graph.nodes[nid].weights["weight"].data
            tensors[c.owner] = {"bits": bits, "scale": minmax_scale(w, bits),
                                "probabilities": [float(v) for v in c.probabilities().data]}
        for c in {id(c): c for c in self.act_choice.values()}.values():
            bits, frozen = finalize(c)
            levels = 2 ** (bits - 1) - 1 if c.signed else 2 ** bits - 1
            tensors[c.owner] = {"bits": bits, "alpha": frozen["alpha"], "signed": c.signed,
                                "scale": frozen["alpha"] / levels, "consumers": list(c.members),
                                "probabilities": [float(v) for v in c.probabilities().data]}
        return {"method": self.method, "tensors": tensors}


def attach(g: Graph, exclude: Sequence[str] = (), costs=None,
           precisions: Sequence[int] = DEFAULT_PRECISIONS, alpha_init: float = 8.0) -> MPS:
    """Attach precision choices to a graph whose BatchNorms are already folded."""
    reject_stacking(g, MPS.method)
    for nid, node in g.nodes.items():
        if node.kind == "BatchNorm" and not node.annotations.get("unfoldable"):
            raise GraphError(f"BatchNorm {nid!r} must be folded before mixed-precision search; "
                             "run passes.fold_bn first")
    model = MPS.__new__(MPS)
    model._setup(g.copy(), costs, precisions, exclude, alpha_init)
    return model

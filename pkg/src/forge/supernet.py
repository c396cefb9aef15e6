"""Path-based search: trainable branch logits at every supernet combiner."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .cost import expected_cost, resolve_spec
from .executor import ExecutionError
from .functional import softmax
from .graph import Graph, GraphError, Node
from .model import SearchModel, static_bag
from .passes import export_supernet, supernet_branches
from .quant import gumbel_softmax, sample_gumbel
from .tensor import Tensor


@dataclass
class BranchLogits:
    combiner: str
    theta: Tensor
    tau: float = 1.0

    @property
    def size(self) -> int:
        return self.theta.shape[0]


def combine(branch_outputs: Sequence[Tensor], logits: BranchLogits, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Weighted sum of branch outputs.

    In train mode the weights are a Gumbel-Softmax sample drawn from ``rng``;
    in eval mode the noise is zero.
    """
    if len(branch_outputs) != logits.size:
        raise ExecutionError(f"combiner {logits.combiner!r}: {len(branch_outputs)} branch outputs "
                             f"for {logits.size} logits")
    shape = branch_outputs[0].shape
    for i, b in enumerate(branch_outputs[1:], start=1):
        if b.shape != shape:
            raise ExecutionError(f"combiner {logits.combiner!r}: branch {i} shape {b.shape} "
                                 f"differs from branch 0 shape {shape}")
    noise = None
    if mode == "train":
        if rng is None:
            raise ExecutionError("train-mode combine needs a random generator")
        noise = sample_gumbel((logits.size,), rng, logits.theta.dtype)
    w = gumbel_softmax(logits.theta, logits.tau, noise)
    out = branch_outputs[0] * w[0]
    for i in range(1, logits.size):
        out = out + branch_outputs[i] * w[i]
    return out


def expected_branch_cost(logits: Tensor, branch_costs: Sequence) -> Tensor:
    """Softmax-weighted branch costs (no sampling noise)."""
    return expected_cost(softmax(logits), branch_costs)


def select(logits) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return int(np.argmax(values))


class SuperNet(SearchModel):
    """A supernet graph with one :class:`BranchLogits` per combiner.

    :param graph: graph containing ``SuperNetCombiner`` nodes
    :param costs: cost specifications
    :param tau: Gumbel-Softmax temperature
    :param tau_final: when given, the temperature is annealed linearly to this
        value over the training schedule
    :param seed: seed of the generator used when ``forward`` gets no ``rng``
    """

    method = "supernet"

    def __init__(self, graph: Graph, costs=None, tau: float = 1.0,
                 tau_final: Optional[float] = None, seed: int = 0):
        combiners = graph.nodes_of_kind("SuperNetCombiner")
        if not combiners:
            raise GraphError("graph has no SuperNetCombiner node to search")
        if any("weight_bits" in n.params or "input_quant" in n.params
               for n in graph.nodes.values()):
            raise GraphError("cannot attach a supernet search to an MPS-converted graph")
        super().__init__(graph.copy(), costs)
        self.tau0 = float(tau)
        self.tau_final = tau_final
        self.rng = np.random.default_rng(seed)
        self.logits: Dict[str, BranchLogits] = {}
        self.branches: Dict[str, List[List[str]]] = {}
        self.membership: Dict[str, List[tuple]] = {}
        for c in combiners:
            m = self.graph.nodes[c].params["branches"]
            theta = Tensor(np.zeros(m), requires_grad=True, name=f"supernet.{c}.theta")
            self.logits[c] = BranchLogits(c, theta, self.tau0)
            self.branches[c] = supernet_branches(self.graph, c)
            for i, nodes in enumerate(self.branches[c]):
                for nid in nodes:
                    self.membership.setdefault(nid, []).append((c, i))

    # -- runtime hooks -----------------------------------------------------
    def combine(self, node: Node, inputs, mode, rng):
        return combine(inputs, self.logits[node.id], mode, rng if rng is not None else self.rng)

    def arch_parameters(self) -> List[Tensor]:
        return [bl.theta for bl in self.logits.values()]

    def set_progress(self, fraction: float) -> None:
        if self.tau_final is None:
            return
        fraction = min(max(fraction, 0.0), 1.0)
        tau = self.tau0 + (self.tau_final - self.tau0) * fraction
        for bl in self.logits.values():
            bl.tau = tau

    # -- costs -------------------------------------------------------------
    def cost_context(self):
        return {c: softmax(bl.theta) for c, bl in self.logits.items()}

    def cost_weight(self, nid: str, context: Any = None):
        weight: Any = 1.0
        for c, i in self.membership.get(nid, ()):
            weight = context[c][i] * weight
        return weight

    def branch_costs(self, combiner: str, spec) -> List[float]:
        """Static cost of each branch of ``combiner`` under ``spec``."""
        spec = resolve_spec(spec)
        out = []
        for nodes in self.branches[combiner]:
            total = 0.0
            for nid in nodes:
                node = self.graph.nodes[nid]
                rule = spec.rule_for(nid, node.kind, node.params)
                if rule is not None:
                    v = rule.evaluate(static_bag(self.graph, nid, self.shapes))
                    total += float(v.item() if isinstance(v, Tensor) else v)
            out.append(total)
        return out

    # -- results -----------------------------------------------------------
    def selection(self) -> Dict[str, int]:
        return {c: select(bl.theta) for c, bl in self.logits.items()}

    def export(self) -> Graph:
        return export_supernet(self.graph, self.selection())

    def arch_state(self) -> Dict[str, np.ndarray]:
        return {f"supernet.{c}.theta": bl.theta.data for c, bl in self.logits.items()}

    def _arch_tensor(self, key: str) -> Tensor:
        return self.logits[key[len("supernet."):-len(".theta")]].theta

    def report(self) -> Dict[str, Any]:
        sel = self.selection()
        return {"method": self.method, "combiners": {
            c: {"probabilities": [float(v) for v in softmax(bl.theta).data],
                "selected": sel[c], "tau": bl.tau,
                "branches": self.branches[c]} for c, bl in self.logits.items()}}

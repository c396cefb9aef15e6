"""Topological forward evaluation of a :class:`~forge.graph.Graph`."""
from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from . import functional as F
from .graph import Graph, GraphError, Node
from .quant import fake_quant_act_pact, fake_quant_weight_minmax
from .tensor import Tensor, add as tadd, concat


class ExecutionError(RuntimeError):
    pass


class Runtime:
    """Hooks through which search methods alter how nodes are evaluated.

    The base runtime executes plain graphs, including exported mixed-precision
    graphs whose nodes carry fixed ``weight_bits``/``bias_bits``/``input_quant``
    parameters.
    """

    def weights(self, node: Node, mode: str) -> Dict[str, Tensor]:
        w = dict(node.weights)
        bits = node.params.get("weight_bits")
        if bits is not None:
            w["weight"] = fake_quant_weight_minmax(w["weight"], int(bits))
        bbits = node.params.get("bias_bits")
        if bbits is not None and "bias" in w:
            w["bias"] = fake_quant_weight_minmax(w["bias"], int(bbits))
        return w

    def node_input(self, node: Node, x: Tensor, mode: str) -> Tensor:
        spec = node.params.get("input_quant")
        if spec is None:
            return x
        alpha = Tensor(np.asarray(spec["alpha"], dtype=x.dtype))
        return fake_quant_act_pact(x, int(spec["bits"]), alpha, signed=bool(spec.get("signed")))

    def combine(self, node: Node, inputs: Sequence[Tensor], mode: str,
                rng: Optional[np.random.Generator]) -> Tensor:
        raise ExecutionError(f"node {node.id!r} is a supernet combiner; "
                             "execute it through a SuperNet search model")


PLAIN = Runtime()


def _to_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def execute(g: Graph, inputs: Union[Tensor, np.ndarray, Sequence, Mapping], mode: str = "eval",
            rng: Optional[np.random.Generator] = None, runtime: Optional[Runtime] = None,
            check_finite: bool = True) -> List[Tensor]:
    """Evaluate ``g`` on ``inputs`` and return one tensor per graph output.

    :param mode: ``"train"`` (batch-norm statistics update, Gumbel noise at
        combiners) or ``"eval"`` (deterministic)
    :param rng: generator used for stochastic train-mode operations
    :param runtime: evaluation hooks; defaults to plain execution
    :raises ExecutionError: on missing inputs or non-finite intermediate values
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    runtime = runtime or PLAIN
    if isinstance(inputs, Mapping):
        feed = {k: _to_tensor(v) for k, v in inputs.items()}
    elif isinstance(inputs, (Tensor, np.ndarray)):
        feed = {g.inputs[0]: _to_tensor(inputs)}
    else:
        feed = {k: _to_tensor(v) for k, v in zip(g.inputs, inputs)}
    values: Dict[str, Tensor] = {}
    for nid in g.inputs:
        if nid not in feed:
            raise ExecutionError(f"no value supplied for input {nid!r}")
        declared = tuple(g.nodes[nid].params["shape"])
        if tuple(feed[nid].shape[1:]) != declared:
            raise ExecutionError(f"input {nid!r}: got shape {feed[nid].shape}, "
                                 f"expected [N, {', '.join(map(str, declared))}]")
        values[nid] = feed[nid]

    for nid in g.topological_order():
        node = g.nodes[nid]
        if node.kind == "Input":
            continue
        ins = [values[s] for s in g.predecessors(nid)]
        out = _apply(node, ins, mode, rng, runtime)
        if check_finite and not np.all(np.isfinite(out.data)):
            raise ExecutionError(f"non-finite values produced at node {nid!r} ({node.kind})")
        values[nid] = out
    return [values[o] for o in g.outputs]


def _apply(node: Node, ins: List[Tensor], mode: str, rng, runtime: Runtime) -> Tensor:
    kind, p = node.kind, node.params
    if kind in ("Conv2d", "DepthwiseConv2d", "Linear"):
        x = runtime.node_input(node, ins[0], mode)
        w = runtime.weights(node, mode)
        if "weight" not in w:
            raise ExecutionError(f"node {node.id!r} has no weight tensor")
        if kind == "Linear":
            return F.linear(x, w["weight"], w.get("bias"))
        geo = node.conv_geometry()
        return F.conv2d(x, w["weight"], w.get("bias"), stride=geo["stride"],
                        padding=geo["padding"], groups=geo["groups"])
    if kind == "BatchNorm":
        w = node.weights
        missing = [k for k in ("weight", "bias", "running_mean", "running_var") if k not in w]
        if missing:
            raise ExecutionError(f"node {node.id!r} is missing {missing}")
        return F.batchnorm(ins[0], w["weight"], w["bias"], w["running_mean"], w["running_var"],
                           training=mode == "train", momentum=p["momentum"], eps=p["eps"])
    if kind == "ReLU":
        return F.relu(ins[0])
    if kind in ("Identity", "Output"):
        return ins[0]
    if kind == "MaxPool":
        return F.maxpool2d(ins[0], p["kernel_size"], p.get("stride"), p.get("padding", 0))
    if kind == "AvgPool":
        return F.avgpool2d(ins[0], p["kernel_size"], p.get("stride"), p.get("padding", 0))
    if kind == "GlobalAvgPool":
        return F.global_avgpool(ins[0])
    if kind == "Flatten":
        return F.flatten(ins[0])
    if kind == "Add":
        out = ins[0]
        for t in ins[1:]:
            if t.shape != out.shape:
                raise ExecutionError(f"Add {node.id!r}: operand shapes {out.shape} vs {t.shape}")
            out = tadd(out, t)
        return out
    if kind == "Concat":
        return concat(ins, axis=p.get("axis", 1))
    if kind == "SuperNetCombiner":
        return runtime.combine(node, ins, mode, rng)
    raise GraphError(f"cannot execute node kind {kind}")

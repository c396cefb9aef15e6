"""Differentiable cost specifications.

A :class:`CostSpec` maps node patterns to registered cost functions. Each
cost function receives a *parameter bag* describing one matched node with
method-agnostic names (``out_channels``, ``in_channels``, ``kernel_size``,
``weight_bits``...). A search method substitutes effective, differentiable
values into the bag; a plain graph gets static numbers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, as_tensor, maximum, relu

CostFn = Callable[..., Any]
_REGISTRY: Dict[str, CostFn] = {}


class CostError(ValueError):
    pass


def register_cost(name: str, fn: Optional[CostFn] = None):
    """Register ``fn(bag, **args)`` under ``name``; usable as a decorator."""
    def wrap(f):
        _REGISTRY[name] = f
        return f
    return wrap(fn) if fn is not None else wrap


def cost_function(name: str) -> CostFn:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise CostError(f"no cost function registered as {name!r}") from None


# ---------------------------------------------------------------------------
# builtin cost functions
# ---------------------------------------------------------------------------

def _kernel_area(bag) -> int:
    kh, kw = bag["kernel_size"]
    return kh * kw


def weight_count(bag):
    kind = bag["kind"]
    if kind == "Conv2d":
        cin = bag["in_channels"]
        if bag.get("groups", 1) != 1:
            cin = cin * (1.0 / bag["groups"])
        return bag["out_channels"] * cin * _kernel_area(bag)
    if kind == "DepthwiseConv2d":
        return bag["out_channels"] * _kernel_area(bag)
    if kind == "Linear":
        return bag["out_features"] * bag["in_features"]
    return 0.0


def bias_count(bag):
    if not bag.get("bias"):
        return 0.0
    return bag["out_features"] if bag["kind"] == "Linear" else bag["out_channels"]


@register_cost("params")
def params_cost(bag):
    return weight_count(bag) + bias_count(bag)


@register_cost("params_bytes")
def params_bytes_cost(bag):
    return (weight_count(bag) * bag["weight_bits"] + bias_count(bag) * bag["bias_bits"]) * 0.125


@register_cost("macs")
def macs_cost(bag):
    kind = bag["kind"]
    if kind in ("Conv2d", "DepthwiseConv2d"):
        return weight_count(bag) * (bag["out_height"] * bag["out_width"])
    if kind == "Linear":
        return weight_count(bag)
    return 0.0


@register_cost("zero")
def zero_cost(bag):
    return 0.0


@register_cost("constant")
def constant_cost(bag, value: float = 0.0):
    return float(value)


# ---------------------------------------------------------------------------
# specifications
# ---------------------------------------------------------------------------

@dataclass
class CostRule:
    kind: Optional[Sequence[str]] = None
    attrs: Dict[str, Any] = field(default_factory=dict)
    cost: Union[str, CostFn] = "zero"
    args: Dict[str, Any] = field(default_factory=dict)

    def matches(self, kind: str, params: Mapping[str, Any]) -> bool:
        if self.kind is not None and kind not in self.kind:
            return False
        return all(params.get(k) == v for k, v in self.attrs.items())

    def evaluate(self, bag):
        fn = cost_function(self.cost) if isinstance(self.cost, str) else self.cost
        return fn(bag, **self.args)


@dataclass
class CostSpec:
    """Ordered pattern -> cost-function rules; the first matching rule wins."""
    name: str
    rules: List[CostRule]
    default: str = "zero"

    def __post_init__(self):
        if self.default not in ("zero", "error"):
            raise CostError(f"default behaviour must be 'zero' or 'error', got {self.default!r}")

    def rule_for(self, node_id: str, kind: str, params: Mapping[str, Any]) -> Optional[CostRule]:
        for rule in self.rules:
            if rule.matches(kind, params):
                return rule
        if self.default == "error":
            raise CostError(f"cost spec {self.name!r} has no rule for node {node_id!r} ({kind})")
        return None

    @classmethod
    def from_dict(cls, desc: Mapping[str, Any]) -> "CostSpec":
        rules = []
        for r in desc.get("rules", []):
            match = r.get("match", {})
            kind = match.get("kind")
            if isinstance(kind, str):
                kind = [kind]
            rules.append(CostRule(kind, dict(match.get("attrs", {})), r["cost"],
                                  dict(r.get("args", {}))))
            cost_function(r["cost"]) if isinstance(r["cost"], str) else None
        return cls(desc.get("name", "custom"), rules, desc.get("default", "zero"))

    def to_dict(self) -> Dict[str, Any]:
        rules = []
        for r in self.rules:
            if not isinstance(r.cost, str):
                raise CostError("specs holding python callables cannot be serialized")
            match: Dict[str, Any] = {}
            if r.kind is not None:
                match["kind"] = list(r.kind)
            if r.attrs:
                match["attrs"] = dict(r.attrs)
            rules.append({"match": match, "cost": r.cost, "args": dict(r.args)})
        return {"name": self.name, "default": self.default, "rules": rules}

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CostSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _builtin(name: str) -> CostSpec:
    return CostSpec(name, [CostRule(["Conv2d", "DepthwiseConv2d", "Linear"], cost=name)])


PARAMS = _builtin("params")
PARAMS_BYTES = _builtin("params_bytes")
MACS = _builtin("macs")
BUILTIN_SPECS = {"params": PARAMS, "params_bytes": PARAMS_BYTES, "macs": MACS}


def resolve_spec(spec: Union[str, CostSpec, Mapping]) -> CostSpec:
    if isinstance(spec, CostSpec):
        return spec
    if isinstance(spec, Mapping):
        return CostSpec.from_dict(spec)
    if spec in BUILTIN_SPECS:
        return BUILTIN_SPECS[spec]
    path = Path(spec)
    if path.suffix == ".json" and path.exists():
        return CostSpec.load(path)
    raise CostError(f"unknown cost spec {spec!r}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def get_cost(model, spec: Union[str, CostSpec]) -> Tensor:
    """Evaluate ``spec`` over every node of a search model (or plain graph).

    The model supplies ``cost_entries()``: ``(node_id, kind, params, bag, weight)``
    tuples where ``weight`` scales the node's cost (supernet branch
    probabilities; 1 elsewhere).
    """
    from .model import as_model

    spec = resolve_spec(spec)
    model = as_model(model)
    total: Any = 0.0
    for nid, kind, params, bag, weight in model.cost_entries():
        rule = spec.rule_for(nid, kind, params)
        if rule is None:
            continue
        value = rule.evaluate(bag)
        if isinstance(value, (int, float)) and value == 0:
            continue
        term = value if isinstance(weight, (int, float)) and weight == 1 else value * weight
        total = total + term
    return total if isinstance(total, Tensor) else Tensor(np.asarray(float(total)))


def expected_cost(probabilities: Tensor, costs: Sequence) -> Tensor:
    """Probability-weighted sum of per-branch costs."""
    total: Any = 0.0
    for i, c in enumerate(costs):
        total = total + probabilities[i] * c
    return as_tensor(total)


def combine_costs(loss: Tensor, costs: Mapping[str, Any],
                  terms: Union[Sequence[Mapping[str, Any]], Callable, float, None] = None) -> Tensor:
    """Add cost regularizers to a task loss.

    ``terms`` is either a callable ``f(costs) -> scalar``, a single strength
    applied to the sole cost, or a list of term descriptions::

        {"cost": "params", "strength": 1e-4}                      # strength * cost
        {"cost": "macs", "strength": 1e-6, "budget": 5e4}          # strength * max(0, cost - budget)
        {"cost": ["params", "macs"], "strength": 1.0, "op": "max"} # strength * max(costs)

    :raises CostError: when a cost value is not finite
    """
    for name, value in costs.items():
        v = value.data if isinstance(value, Tensor) else np.asarray(value)
        if not np.all(np.isfinite(v)):
            raise CostError(f"cost {name!r} is not finite: {v}")
    if terms is None:
        return loss
    if callable(terms):
        return loss + terms(costs)
    if isinstance(terms, (int, float)):
        if len(costs) != 1:
            raise CostError("a bare strength needs exactly one cost")
        terms = [{"cost": next(iter(costs)), "strength": float(terms)}]
    total = loss
    for term in terms:
        strength = float(term.get("strength", term.get("weight", 1.0)))
        names = term["cost"] if isinstance(term["cost"], (list, tuple)) else [term["cost"]]
        values = [as_tensor(costs[n]) for n in names]
        if term.get("op") == "max" or len(values) > 1:
            value = values[0]
            for v in values[1:]:
                value = maximum(value, v)
        else:
            value = values[0]
        if "budget" in term:
            value = relu(value - float(term["budget"]))
        if strength == 0:
            continue
        total = total + value * strength
    return total

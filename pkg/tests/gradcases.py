"""Finite-difference gradient cases for every differentiable primitive.

Each case builds random float64 inputs, the operation under test and, for ops
with a straight-through backward rule, a surrogate whose derivative is the
declared STE. The surrogate keeps the forward value at the unperturbed point
and varies as the STE says it should around it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from forge import functional as F
from forge import quant
from forge import tensor as T
from forge.mps import PrecisionChoice, effective_bitwidth, effective_tensor
from forge.pit import PIT, effective_channel_count, masked_weight
from forge.supernet import BranchLogits, SuperNet, combine
from forge.tensor import Tensor, check_mode
from forge.mps import MPS
from forge import zoo

from oracles import central_differences, relative_error


@dataclass
class Case:
    name: str
    make: Callable  # rng -> (inputs, consts)
    op: Callable  # (tensors, consts) -> Tensor
    surrogate: Optional[Callable] = None  # (arrays, consts) -> ndarray


def _away(rng, shape, points=(0.0,), gap=0.05, scale=1.0):
    """Normal samples kept at least ``gap`` away from each kink in ``points``."""
    x = rng.standard_normal(shape) * scale
    for p in points:
        close = np.abs(x - p) < gap
        x[close] = p + np.where(x[close] >= p, gap, -gap) * 2
    return x


def _clamp(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)


def _minmax_np(w, bits):
    qmax = 2 ** (bits - 1) - 1
    top = np.max(np.abs(w))
    if top == 0:
        return w.copy()
    return np.clip(np.round(w * (qmax / top)), -qmax - 1, qmax) * (top / qmax)


def _pact_np(x, bits, a, signed):
    lo = -a if signed else 0.0
    levels = 2 ** (bits - 1) - 1 if signed else 2 ** bits - 1
    s = a / levels
    return np.round(_clamp(x, lo, a) / s) * s


def _softmax_np(z):
    e = np.exp(z - z.max())
    return e / e.sum()


# -- pact helpers: inputs keep clear of the clamp edges ----------------------

def _pact_inputs(rng, signed):
    a = float(rng.uniform(0.5, 2.0))
    x = rng.uniform(-2.5, 3.0, size=(3, 5))
    edges = (-a, 0.0, a) if signed else (0.0, a)
    for e in edges:
        close = np.abs(x - e) < 0.02
        x[close] = e + 0.05
    return x, a


def _pact_case(signed):
    def make(rng):
        x, a = _pact_inputs(rng, signed)
        bits = int(rng.choice([2, 4, 8]))
        return [x, np.asarray(a)], {"bits": bits, "x0": x.copy(), "a0": a}

    def op(t, c):
        return quant.fake_quant_act_pact(t[0], c["bits"], t[1], signed=signed)

    def sur(arr, c):
        x, a = arr[0], float(arr[1])
        lo, lo0 = (-a, -c["a0"]) if signed else (0.0, 0.0)
        base = _pact_np(c["x0"], c["bits"], c["a0"], signed)
        return base + _clamp(x, lo, a) - _clamp(c["x0"], lo0, c["a0"])

    return Case(f"fake_quant_act_pact{'_signed' if signed else ''}", make, op, sur)


# -- search-model cost fixtures --------------------------------------------

def _supernet_cost_case():
    def make(rng):
        g = zoo.supernet_cnn(input_shape=(1, 8, 8), widths=(2, 3, 3), seed=0)
        model = SuperNet(g, ["params", "macs"])
        thetas = [rng.standard_normal(bl.size) for bl in model.logits.values()]
        return thetas, {"model": model, "cost": str(rng.choice(["params", "macs"]))}

    def op(t, c):
        model = c["model"]
        for bl, th in zip(model.logits.values(), t):
            bl.theta = th
        return model.get_cost(c["cost"])

    return Case("get_cost_supernet", make, op)


def _mps_cost_case():
    def make(rng):
        model = MPS(zoo.residual_fixture(seed=1, channels=3, width=4, input_shape=(2, 4, 4)),
                    ["params_bytes"])
        thetas = [rng.standard_normal(len(ch.precisions)) for ch in model.choices()]
        return thetas, {"model": model}

    def op(t, c):
        for ch, th in zip(c["model"].choices(), t):
            ch.theta = th
        return c["model"].get_cost("params_bytes")

    return Case("get_cost_mps", make, op)


def _pit_cost_case():
    def make(rng):
        model = PIT(zoo.residual_fixture(seed=2, channels=4, width=6, input_shape=(2, 4, 4)),
                    ["params", "macs"])
        thetas = [rng.uniform(-0.5, 1.5, size=m.size) for m in model.masks.values()]
        for th in thetas:
            th[np.abs(th - 0.5) < 0.02] = 0.6
        return thetas, {"model": model, "theta0": [th.copy() for th in thetas],
                        "cost": str(rng.choice(["params", "macs"]))}

    def op(t, c):
        for m, th in zip(c["model"].masks.values(), t):
            m.theta = th
        return c["model"].get_cost(c["cost"])

    def sur(arr, c):
        model = c["model"]
        ctx = {}
        for (gid, m), th, th0 in zip(model.masks.items(), arr, c["theta0"]):
            ctx[gid] = Tensor(np.asarray(float((th0 >= 0.5).sum() + (th - th0).sum())))
            m.theta = Tensor(th0)
        original = model.cost_context
        model.cost_context = lambda: ctx
        try:
            return model.get_cost(c["cost"]).data
        finally:
            model.cost_context = original

    return Case("get_cost_pit", make, op, sur)


def build_cases() -> List[Case]:
    cases = [
        Case("add", lambda r: ([r.standard_normal((3, 4)), r.standard_normal(4)], {}),
             lambda t, c: t[0] + t[1]),
        Case("sub", lambda r: ([r.standard_normal((3, 4)), r.standard_normal((3, 1))], {}),
             lambda t, c: t[0] - t[1]),
        Case("mul", lambda r: ([r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))], {}),
             lambda t, c: t[0] * t[1]),
        Case("div", lambda r: ([r.standard_normal((3, 4)), r.uniform(0.5, 2.0, (3, 4))], {}),
             lambda t, c: t[0] / t[1]),
        Case("power", lambda r: ([r.uniform(0.5, 2.0, (5,))], {}), lambda t, c: t[0] ** 3),
        Case("exp_log", lambda r: ([r.uniform(0.2, 2.0, (4, 3))], {}),
             lambda t, c: T.log(t[0]) + T.exp(t[0] * 0.5)),
        Case("sqrt", lambda r: ([r.uniform(0.2, 2.0, (6,))], {}), lambda t, c: T.sqrt(t[0])),
        Case("relu", lambda r: ([_away(r, (4, 5))], {}), lambda t, c: F.relu(t[0])),
        Case("maximum", lambda r: ([r.standard_normal(6), r.standard_normal(6) + 3 * (r.random(6) > .5)],
                                   {}), lambda t, c: T.maximum(t[0], t[1])),
        Case("matmul", lambda r: ([r.standard_normal((3, 4)), r.standard_normal((4, 2))], {}),
             lambda t, c: t[0] @ t[1]),
        Case("sum_mean", lambda r: ([r.standard_normal((2, 3, 4))], {}),
             lambda t, c: t[0].sum(axis=1, keepdims=True) * t[0].mean(axis=(0, 2), keepdims=True)),
        Case("reshape_transpose", lambda r: ([r.standard_normal((2, 3, 4))], {}),
             lambda t, c: t[0].reshape(6, 4).T),
        Case("getitem", lambda r: ([r.standard_normal((4, 5))], {}),
             lambda t, c: t[0][1:3, ::2]),
        Case("concat", lambda r: ([r.standard_normal((2, 2, 3)), r.standard_normal((2, 3, 3))], {}),
             lambda t, c: T.concat(t, axis=1)),
        Case("stack", lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 3))], {}),
             lambda t, c: T.stack(t, axis=0)),
        Case("conv2d", lambda r: ([r.standard_normal((1, 4, 4, 4)), r.standard_normal((4, 2, 3, 3)),
                                   r.standard_normal(4)], {}),
             lambda t, c: F.conv2d(t[0], t[1], t[2], stride=2, padding=1, groups=2)),
        Case("conv2d_depthwise", lambda r: ([r.standard_normal((1, 3, 4, 4)),
                                             r.standard_normal((3, 1, 3, 3))], {}),
             lambda t, c: F.conv2d(t[0], t[1], None, padding=1, groups=3)),
        Case("linear", lambda r: ([r.standard_normal((3, 5)), r.standard_normal((2, 5)),
                                   r.standard_normal(2)], {}),
             lambda t, c: F.linear(t[0], t[1], t[2])),
        Case("flatten", lambda r: ([r.standard_normal((2, 3, 2, 2))], {}),
             lambda t, c: F.flatten(t[0])),
        Case("maxpool2d", lambda r: ([r.standard_normal((2, 2, 4, 4))], {}),
             lambda t, c: F.maxpool2d(t[0], 2)),
        Case("avgpool2d", lambda r: ([r.standard_normal((1, 2, 5, 5))], {}),
             lambda t, c: F.avgpool2d(t[0], 3, stride=2, padding=1)),
        Case("global_avgpool", lambda r: ([r.standard_normal((2, 3, 3, 3))], {}),
             lambda t, c: F.global_avgpool(t[0])),
        Case("batchnorm_train", lambda r: ([r.standard_normal((4, 3, 2, 2)), r.uniform(0.5, 2, 3),
                                            r.standard_normal(3)], {}),
             lambda t, c: F.batchnorm(t[0], t[1], t[2], Tensor(np.zeros(3)), Tensor(np.ones(3)),
                                      training=True)),
        Case("batchnorm_eval", lambda r: ([r.standard_normal((4, 3)), r.uniform(0.5, 2, 3),
                                           r.standard_normal(3)],
                                          {"m": r.standard_normal(3), "v": r.uniform(0.5, 2, 3)}),
             lambda t, c: F.batchnorm(t[0], t[1], t[2], Tensor(c["m"]), Tensor(c["v"]),
                                      training=False)),
        Case("softmax", lambda r: ([r.standard_normal((3, 4))], {}),
             lambda t, c: F.softmax(t[0], axis=1)),
        Case("log_softmax", lambda r: ([r.standard_normal((3, 4))], {}),
             lambda t, c: F.log_softmax(t[0], axis=1)),
        Case("cross_entropy", lambda r: ([r.standard_normal((5, 3))], {"y": r.integers(0, 3, 5)}),
             lambda t, c: F.cross_entropy(t[0], c["y"])),
        Case("gumbel_softmax", lambda r: ([r.standard_normal(4)],
                                          {"noise": quant.sample_gumbel(4, r, np.float64),
                                           "tau": float(r.uniform(0.3, 2.0))}),
             lambda t, c: quant.gumbel_softmax(t[0], c["tau"], c["noise"])),
        Case("heaviside_ste",
             lambda r: ([_away(r, 6, points=(0.5,), gap=0.02)], {}),
             lambda t, c: quant.heaviside_ste(t[0], 0.5),
             None),
        Case("fake_quant_weight_minmax",
             lambda r: ([r.standard_normal((3, 4))], {"bits": int(r.choice([2, 4, 8]))}),
             lambda t, c: quant.fake_quant_weight_minmax(t[0], c["bits"]),
             None),
        _pact_case(False),
        _pact_case(True),
        Case("masked_weight", None, lambda t, c: masked_weight(t[0], quant.heaviside_ste(t[1])), None),
        Case("effective_channel_count", None,
             lambda t, c: effective_channel_count(_mask(t[0])), None),
        Case("effective_tensor_weight", None, None, None),
        Case("effective_tensor_activation", None, None, None),
        Case("effective_bitwidth", lambda r: ([r.standard_normal(3)], {}),
             lambda t, c: effective_bitwidth(PrecisionChoice("w", "weight", (2, 4, 8), t[0]))),
        Case("supernet_combine", lambda r: ([r.standard_normal(3)] + [r.standard_normal((2, 3))
                                                                      for _ in range(3)], {}),
             lambda t, c: combine(t[1:], BranchLogits("c", t[0]), mode="eval")),
        _supernet_cost_case(),
        _mps_cost_case(),
        _pit_cost_case(),
    ]
    by_name = {c.name: c for c in cases}
    _fill_ste_cases(by_name)
    return cases


def _mask(theta):
    from forge.pit import ChannelMask
    return ChannelMask("g", theta)


def _fill_ste_cases(by_name: Dict[str, Case]) -> None:
    # heaviside: H(theta0) + (theta - theta0)
    hv = by_name["heaviside_ste"]
    base_make = hv.make
    hv.make = lambda r: (lambda arr: (arr, {"t0": arr[0].copy()}))(base_make(r)[0])
    hv.surrogate = lambda a, c: (c["t0"] >= 0.5) + (a[0] - c["t0"])

    fq = by_name["fake_quant_weight_minmax"]
    fq_make = fq.make
    fq.make = lambda r: (lambda res: (res[0], {**res[1], "w0": res[0][0].copy()}))(fq_make(r))
    fq.surrogate = lambda a, c: _minmax_np(c["w0"], c["bits"]) + (a[0] - c["w0"])

    def mw_make(r):
        w = r.standard_normal((4, 3, 2, 2))
        th = _away(r, 4, points=(0.5,), gap=0.02)
        return [w, th], {"th0": th.copy()}
    mw = by_name["masked_weight"]
    mw.make = mw_make
    mw.surrogate = lambda a, c: a[0] * ((c["th0"] >= 0.5) + (a[1] - c["th0"])).reshape(-1, 1, 1, 1)

    def ec_make(r):
        th = _away(r, 32, points=(0.5,), gap=0.02)
        return [th], {"th0": th.copy()}
    ec = by_name["effective_channel_count"]
    ec.make = ec_make
    ec.surrogate = lambda a, c: np.asarray((c["th0"] >= 0.5).sum() + (a[0] - c["th0"]).sum())

    def etw_make(r):
        return [r.standard_normal((3, 4)), r.standard_normal(3)], {}
    etw = by_name["effective_tensor_weight"]
    etw.make = lambda r: (lambda res: (res[0], {"t0": res[0][0].copy()}))(etw_make(r))
    etw.op = lambda t, c: effective_tensor(t[0], PrecisionChoice("w", "weight", (2, 4, 8), t[1]))
    etw.surrogate = lambda a, c: sum(
        p * (_minmax_np(c["t0"], b) + a[0] - c["t0"])
        for p, b in zip(_softmax_np(a[1]), (2, 4, 8)))

    def eta_make(r):
        x, al = _pact_inputs(r, False)
        return [x, r.standard_normal(3), np.asarray(al)], {"x0": x.copy(), "a0": al}
    eta = by_name["effective_tensor_activation"]
    eta.make = eta_make
    eta.op = lambda t, c: effective_tensor(
        t[0], PrecisionChoice("a", "activation", (2, 4, 8), t[1], alpha=t[2]))
    eta.surrogate = lambda a, c: sum(
        p * (_pact_np(c["x0"], b, c["a0"], False) + _clamp(a[0], 0.0, float(a[2]))
             - _clamp(c["x0"], 0.0, c["a0"]))
        for p, b in zip(_softmax_np(a[1]), (2, 4, 8)))


CASES = build_cases()


def check_case(case: Case, seed: int, h: float = 1e-4) -> float:
    """Relative error between analytic gradients and central differences."""
    rng = np.random.default_rng(seed)
    with check_mode():
        arrays, consts = case.make(rng)
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = case.op(tensors, consts)
        proj = rng.standard_normal(out.shape)
        (out * proj).sum().backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(a)
                    for t, a in zip(tensors, arrays)]
        if case.surrogate is not None:
            def f(*arrs):
                return float(np.sum(np.asarray(case.surrogate(arrs, consts)) * proj))
        else:
            def f(*arrs):
                return float(np.sum(case.op([Tensor(a) for a in arrs], consts).data * proj))
        numeric = central_differences(f, [a.copy() for a in arrays], h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))

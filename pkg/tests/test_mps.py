import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forge import zoo
from forge.executor import execute
from forge.graph import GraphError, build_graph
from forge.mps import (MPS, PrecisionChoice, attach, effective_bitwidth, effective_tensor,
                       finalize)
from forge.passes import fold_bn
from forge.quant import fake_quant_weight_minmax
from forge.tensor import Tensor, check_mode

from fixtures import FIXTURES, conv, random_input


def weight_choice(theta, precisions=(2, 4, 8)):
    return PrecisionChoice("n.weight", "weight", tuple(precisions),
                           Tensor(np.asarray(theta, dtype=np.float64), requires_grad=True))


def act_choice(theta, alpha=2.0, signed=False, precisions=(2, 4, 8)):
    return PrecisionChoice("n.act", "activation", tuple(precisions),
                           Tensor(np.asarray(theta, dtype=np.float64), requires_grad=True),
                           alpha=Tensor(np.asarray(alpha), requires_grad=True), signed=signed)


def minmax_oracle(w, bits):
    qmax = 2 ** (bits - 1) - 1
    scale = np.max(np.abs(w)) / qmax
    return np.clip(np.round(w / scale), -qmax - 1, qmax) * scale


def pact_oracle(x, bits, alpha):
    levels = 2 ** bits - 1
    return np.round(np.clip(x, 0, alpha) * levels / alpha) * alpha / levels


def softmax(v):
    e = np.exp(v - np.max(v))
    return e / e.sum()


# -- effective tensors ----------------------------------------------------

def test_one_hot_at_eight_bits_is_the_eight_bit_tensor():
    with check_mode():
        w = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
        out = effective_tensor(w, weight_choice([-1e4, -1e4, 1e4]))
        np.testing.assert_array_equal(out.data, fake_quant_weight_minmax(w, 8).data)


def test_tensor_on_two_bit_grid_is_unchanged():
    with check_mode():
        w = np.array([[0.5, -0.5, 0.0], [0.5, 0.0, -0.5]])
        out = effective_tensor(Tensor(w), weight_choice([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, w, atol=1e-12)


@settings(max_examples=50)
@given(seed=st.integers(0, 2 ** 31))
def test_weight_effective_tensor_matches_three_term_formula(seed):
    rng = np.random.default_rng(seed)
    with check_mode():
        w = rng.standard_normal((5, 3))
        theta = rng.standard_normal(3)
        out = effective_tensor(Tensor(w), weight_choice(theta)).data
    p = softmax(theta)
    want = p[0] * minmax_oracle(w, 2) + p[1] * minmax_oracle(w, 4) + p[2] * minmax_oracle(w, 8)
    np.testing.assert_allclose(out, want, atol=1e-6)


@settings(max_examples=50)
@given(seed=st.integers(0, 2 ** 31))
def test_activation_effective_tensor_matches_three_term_formula(seed):
    rng = np.random.default_rng(seed)
    with check_mode():
        x = rng.standard_normal((4, 6)) * 2
        theta = rng.standard_normal(3)
        out = effective_tensor(Tensor(x), act_choice(theta, alpha=1.5)).data
    p = softmax(theta)
    want = sum(p[i] * pact_oracle(x, b, 1.5) for i, b in enumerate((2, 4, 8)))
    np.testing.assert_allclose(out, want, atol=1e-6)


@settings(max_examples=50)
@given(seed=st.integers(0, 2 ** 31))
def test_effective_tensor_lies_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    with check_mode():
        w = Tensor(rng.standard_normal((6, 4)))
        out = effective_tensor(w, weight_choice(rng.standard_normal(3) * 3)).data
        variants = np.stack([fake_quant_weight_minmax(w, b).data for b in (2, 4, 8)])
    assert np.all(out >= variants.min(axis=0) - 1e-12)
    assert np.all(out <= variants.max(axis=0) + 1e-12)


def test_effective_bitwidth_examples():
    assert effective_bitwidth(weight_choice([0, 0, 0])).item() == pytest.approx(14 / 3)
    assert effective_bitwidth(weight_choice([-1e4, 1e4, -1e4])).item() == pytest.approx(4.0)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.01, 5))
def test_effective_bitwidth_is_monotone_in_largest_precision(theta, delta):
    before = effective_bitwidth(weight_choice(theta)).item()
    bumped = list(theta)
    bumped[-1] += delta
    assert effective_bitwidth(weight_choice(bumped)).item() >= before - 1e-12


def test_invalid_choices():
    with pytest.raises(ValueError, match="empty"):
        PrecisionChoice("n.weight", "weight", (), Tensor(np.zeros(0)))
    with pytest.raises(ValueError, match="logits"):
        weight_choice([0, 0])
    with pytest.raises(ValueError):
        MPS(zoo.seed_cnn(), precisions=())
    with pytest.raises(ValueError):
        MPS(zoo.seed_cnn(), precisions=(1, 4))


# -- finalize -------------------------------------------------------------

def test_finalize_examples():
    assert finalize(weight_choice([0.2, 0.5, 0.3]))[0] == 4
    assert finalize(weight_choice([0.1, 0.7, 0.7]))[0] == 8
    assert finalize(weight_choice([0.7, 0.7, 0.1]))[0] == 4
    bits, frozen = finalize(act_choice([0.9, 0.0, 0.0], alpha=3.0, signed=True))
    assert bits == 2 and frozen == {"bits": 2, "alpha": 3.0, "signed": True}


# -- attachment -----------------------------------------------------------

def test_add_operands_share_one_activation_choice():
    model = MPS(zoo.residual_fixture())
    assert model.producer_choice["pw_a"] is model.producer_choice["pw_b"]
    assert model.act_choice["fc"] is model.producer_choice["pw_a"]
    assert model.act_choice["pw_a"] is model.act_choice["pw_b"]
    assert len(model.weight_choice) == 5
    assert len(model.choices()) == 5 + 4


def test_single_conv_has_one_weight_and_one_activation_choice():
    g = build_graph({"inputs": [{"id": "x", "shape": [3, 4, 4]}], "nodes": [conv("c", 3, 2)]})
    model = MPS(g)
    roles = sorted(c.role for c in model.choices())
    assert roles == ["activation", "weight"]
    assert model.act_choice["c"].owner == "x.act"


def test_excluded_first_layer_stays_full_precision():
    model = MPS(zoo.residual_fixture(), exclude=["conv3x3"])
    assert "conv3x3" not in model.weight_choice and "conv3x3" not in model.act_choice
    out = model.export()
    assert "weight_bits" not in out.nodes["conv3x3"].params
    assert "input_quant" not in out.nodes["conv3x3"].params
    assert out.nodes["dw"].params["weight_bits"] == 8


def test_one_master_tensor_per_weight():
    g = zoo.residual_fixture()
    plain = fold_bn(g).parameters()
    model = MPS(g, precisions=(2, 3, 4, 5, 6, 8))
    assert len(model.parameters()) == len(plain)
    assert sum(p.size for p in model.parameters()) == sum(p.size for p in plain)


def test_signedness_of_activation_quantizers():
    model = MPS(zoo.residual_fixture())
    # conv3x3 reads the (non-negative) input, fc reads the signed Add output
    assert not model.act_choice["conv3x3"].signed
    assert model.act_choice["fc"].signed


def test_attach_before_folding_is_rejected():
    with pytest.raises(GraphError, match="fold_bn"):
        attach(zoo.seed_cnn())
    model = attach(fold_bn(zoo.seed_cnn()))
    assert len(model.weight_choice) == 4


def test_rejects_supernet_and_converted_graphs():
    with pytest.raises(GraphError, match="supernet"):
        MPS(zoo.supernet_cnn())
    exported = MPS(zoo.seed_cnn()).export()
    with pytest.raises(GraphError, match="MPS"):
        MPS(exported)


# -- export ---------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_export_matches_one_hot_search_graph(name):
    rng = np.random.default_rng(4)
    model = MPS(FIXTURES[name]())
    for c in model.choices():
        theta = np.full(3, -1e4, np.float32)
        theta[rng.integers(3)] = 1e4
        c.theta.data = theta
        if c.alpha is not None:
            c.alpha.data = np.asarray(rng.uniform(1, 4), np.float32)
    out = model.export()
    x = random_input(model.graph, 50, rng)
    np.testing.assert_allclose(execute(out, x)[0].data, model.forward(x).data,
                               atol=1e-5, rtol=1e-5)


def test_export_sets_bits_and_bias_floor():
    model = MPS(zoo.residual_fixture())
    for c in model.choices():
        c.theta.data = np.array([1.0, 0.0, 0.0], np.float32)
    out = model.export()
    assert out.nodes["pw_a"].params["weight_bits"] == 2
    assert out.nodes["pw_a"].params["bias_bits"] == 8
    assert out.nodes["fc"].params["input_quant"]["bits"] == 2


def test_arch_state_keys_and_report():
    model = MPS(zoo.residual_fixture())
    keys = set(model.arch_state())
    assert "mps.conv3x3.weight.theta" in keys
    assert "mps.x.act.theta" in keys and "mps.x.act.alpha" in keys
    state = {k: np.array([0.0, 0.0, 5.0], np.float32) for k in keys if k.endswith("theta")}
    model.load_arch_state(state)
    rep = model.report()
    assert rep["method"] == "mps"
    assert all(t["bits"] == 8 for t in rep["tensors"].values())
    assert rep["tensors"]["x.act"]["scale"] == pytest.approx(8.0 / 255)

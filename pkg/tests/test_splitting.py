import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kevo import graph as G
from kevo.engine import SeededRng
from kevo.errors import ConfigError, StructuralError, UnsupportedTechniqueError
from kevo.graph import LayerNode, NetworkGraph
from kevo.splitting import (BnSplit, ConvSplit, LinearSplit, compute_sparsity, extract_slim, identity_mask,
                            kels_split, layer_sparsity, load_mask, masked_dense, profile_network, save_mask,
                            wels_popcount, wels_split)

from helpers import channel_trace_oracle, random_graph, randomize_params
from resnet18_reference import ROWS


def chain(widths, input_channels=3, side=6):
    nodes = [LayerNode("input", "input", out_channels=input_channels, spatial=(side, side))]
    prev, c = "input", input_channels
    for i, co in enumerate(widths):
        nodes.append(LayerNode(f"conv{i}", "conv", (prev,), co, c, 3, 1, 1))
        prev, c = f"conv{i}", co
    g = NetworkGraph(nodes, prev)
    G.validate_and_shape(g)
    return g


# --------------------------------------------------------------------------- KELS geometry

def test_toy_filter_example():
    g = chain([4, 4, 4], input_channels=4)
    spec = kels_split(g, 0.5).specs["conv1"]
    assert spec == ConvSplit(2, (0, 1))


def test_first_conv_keeps_all_input_channels():
    g = chain([8, 8])
    assert kels_split(g, 0.5).specs["conv0"] == ConvSplit(4, (0, 1, 2))


def test_resnet18_slim_dimensions():
    g = G.build_architecture("resnet18", 102, (3, 224, 224))
    params = {k: np.zeros(s, np.float32) for k, s in g.param_shapes().items()}
    sg, _ = extract_slim(g, params, kels_split(g, 0.5))
    shapes = sg.param_shapes()
    got = [(n.name, shapes[f"{n.name}.weight"]) for n in sg.nodes if f"{n.name}.weight" in shapes]
    assert got == [(name, slim) for name, _, slim in ROWS]


def test_concat_per_segment_prefixes():
    g = G.build_architecture("concat-block", 3, (3, 8, 8), width=8, branch_widths=(4, 6))
    mask = kels_split(g, 0.5)
    assert mask.specs["c.conv"].keep_in == (0, 1, 4, 5, 6)
    # cat2 = [c.relu (8 -> keep 4), a.relu (4 -> keep 2)]; bn after concat keeps the mapped union
    assert mask.specs["d.bn"] == BnSplit((0, 1, 2, 3, 8, 9))
    assert mask.specs["e.conv"].keep_in == (0, 1, 2, 3, 8, 9)


def test_final_linear_keeps_all_rows():
    g = G.build_architecture("toy-resnet", 5, (3, 8, 8))
    spec = kels_split(g, 0.3).specs["fc"]
    assert spec.keep_out == 5 and spec.keep_in == (0, 1, 2)


def test_hidden_linear_is_split():
    g = G.build_architecture("mlp", 3, (10,), hidden=(8,))
    m = kels_split(g, 0.5)
    assert m.specs["fc1"] == LinearSplit(4, tuple(range(10)))
    assert m.specs["fc"] == LinearSplit(3, (0, 1, 2, 3))


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_split_rate_range(bad):
    g = chain([4])
    with pytest.raises(ConfigError):
        kels_split(g, bad)
    with pytest.raises(ConfigError):
        wels_split(g, bad, SeededRng(0))


def test_add_with_differing_keep_sets():
    # identity shortcut from the input (all channels kept) meets a split conv branch
    nodes = [LayerNode("input", "input", out_channels=3, spatial=(4, 4)),
             LayerNode("stem", "conv", ("input",), 3, 3, 1),
             LayerNode("branch", "conv", ("stem",), 3, 3, 1),
             LayerNode("sum", "add", ("input", "branch"))]
    g = NetworkGraph(nodes, "sum")
    G.validate_and_shape(g)
    with pytest.raises(StructuralError):
        kels_split(g, 0.5)


def test_ceiling_robust_to_float_noise():
    g = chain([10, 10])
    assert kels_split(g, 0.7).specs["conv1"].keep_out == 7


@pytest.mark.parametrize("family", ["chain", "residual", "concat"])
def test_kels_matches_channel_trace_oracle(family):
    rng = np.random.default_rng(99)
    for _ in range(15):
        g = random_graph(rng, family)
        sr = float(rng.choice([0.3, 0.5, 0.7, 0.8]))
        mask = kels_split(g, sr)
        oracle = channel_trace_oracle(g, sr)
        for name, (ko, kin) in oracle.items():
            assert mask.specs[name].keep_out == ko
            assert list(mask.specs[name].keep_in) == kin


# --------------------------------------------------------------------------- sparsity

def test_interior_layer_sparsity():
    g = chain([10, 10])
    assert layer_sparsity(kels_split(g, 0.8), g)["conv1"] == pytest.approx(0.36)


def test_first_layer_sparsity():
    g = chain([8, 8])
    assert layer_sparsity(kels_split(g, 0.5), g)["conv0"] == pytest.approx(0.5)


def test_wels_network_sparsity():
    g = G.build_architecture("small-vgg-bn", 10, (3, 16, 16))
    assert compute_sparsity(wels_split(g, 0.7, SeededRng(0)), g) == pytest.approx(0.30, abs=2e-3)


@given(st.integers(4, 64), st.sampled_from([0.3, 0.5, 0.7, 0.8]))
@settings(max_examples=40, deadline=None)
def test_interior_sparsity_within_rounding_slack(c, sr):
    g = chain([c, c], side=3)
    s = layer_sparsity(kels_split(g, sr), g)["conv1"]
    assert abs(s - (1 - sr ** 2)) <= 2 / c


# --------------------------------------------------------------------------- WELS

def test_wels_popcount_and_determinism():
    g = G.build_architecture("mlp", 10, (100,))   # fc weight has 1000 entries
    m = wels_split(g, 0.3, SeededRng(4))
    assert m.specs["fc"].popcount == 300
    assert m.specs["fc"] == wels_split(g, 0.3, SeededRng(4)).specs["fc"]
    assert m.specs["fc"] != wels_split(g, 0.3, SeededRng(5)).specs["fc"]


def test_wels_popcount_rounds_half_up():
    assert wels_popcount(0.5, 5) == 3
    assert wels_popcount(0.3, 7) == 2


def test_wels_final_bias_always_fit():
    g = G.build_architecture("mlp", 4, (6,))
    masks = wels_split(g, 0.2, SeededRng(0)).param_masks(g)
    assert masks["fc.bias"].all()


def test_wels_overlap_near_square_of_rate():
    g = G.build_architecture("small-vgg-bn", 10, (3, 16, 16))
    a = wels_split(g, 0.5, SeededRng(1)).param_masks(g)
    b = wels_split(g, 0.5, SeededRng(2)).param_masks(g)
    bits_a = np.concatenate([a[k].ravel() for k in a if k.endswith("weight")])
    bits_b = np.concatenate([b[k].ravel() for k in b if k.endswith("weight")])
    n = bits_a.size
    assert n >= 10 ** 4
    overlap = np.mean(bits_a & bits_b)
    assert abs(overlap - 0.25) < 3 * math.sqrt(0.25 * 0.75 / n)


# --------------------------------------------------------------------------- extraction

def test_identity_mask_gives_identical_network(rng):
    g = G.build_architecture("concat-block", 3, (3, 8, 8))
    params = randomize_params(g, rng, np.float32)
    sg, sp = extract_slim(g, params, identity_mask(g))
    assert sg.nodes == g.nodes
    for k in params:
        assert sp[k].tobytes() == params[k].tobytes()


def test_wels_extraction_rejected():
    g = chain([4, 4])
    with pytest.raises(UnsupportedTechniqueError):
        extract_slim(g, {}, wels_split(g, 0.5, SeededRng(0)))


@pytest.mark.parametrize("family", ["chain", "residual", "concat"])
def test_slim_equals_masked_dense(family, rng):
    for _ in range(4):
        g = random_graph(rng, family)
        params = randomize_params(g, rng)
        mask = kels_split(g, float(rng.choice([0.3, 0.5, 0.7, 0.8])))
        x = rng.normal(size=(3, *g.input_shape))
        sg, sp = extract_slim(g, params, mask)
        dense = G.forward(g, masked_dense(g, params, mask), x)
        np.testing.assert_allclose(G.forward(sg, sp, x), dense, atol=1e-10)


def test_slim_copies_bn_running_stats(rng):
    g = G.build_architecture("toy-resnet", 3, (3, 8, 8), width=4)
    params = randomize_params(g, rng)
    _, sp = extract_slim(g, params, kels_split(g, 0.5))
    np.testing.assert_array_equal(sp["bn1.running_var"], params["bn1.running_var"][:2])


# --------------------------------------------------------------------------- profiling

def test_profile_empty_chain():
    g = NetworkGraph([LayerNode("input", "input", out_channels=3, spatial=(4, 4))], "input")
    rep = profile_network(g)
    assert rep.total_ops == 0 and rep.total_params == 0


def test_profile_conv_formula():
    g = chain([5], input_channels=2, side=4)
    rep = profile_network(g)
    assert rep.total_ops == 2 * 5 * 2 * 9 * 16
    assert rep.total_params == 5 * 9 * 2


def test_profile_totals_are_breakdown_sums():
    rep = profile_network(G.build_architecture("toy-resnet", 5, (3, 8, 8)))
    assert rep.total_ops == sum(l.ops for l in rep.layers)
    assert rep.to_csv().strip().splitlines()[-1] == f"total,,{rep.total_ops},{rep.total_params}"


def test_profile_resnet18_within_one_percent():
    from resnet18_reference import DENSE_GOPS, DENSE_MPARAMS
    rep = profile_network(G.build_architecture("resnet18", 102, (3, 224, 224)))
    assert rep.total_ops / 1e9 == pytest.approx(DENSE_GOPS, rel=0.01)
    assert rep.total_params / 1e6 == pytest.approx(DENSE_MPARAMS, rel=0.01)


def test_profile_input_shape_override():
    g = G.build_architecture("toy-resnet", 5, (3, 8, 8))
    assert profile_network(g, (3, 16, 16)).total_ops > profile_network(g).total_ops


# --------------------------------------------------------------------------- mask files

@pytest.mark.parametrize("technique", ["kels", "wels"])
def test_mask_file_round_trip(tmp_path, technique):
    g = G.build_architecture("concat-block", 3, (3, 8, 8))
    m = kels_split(g, 0.5) if technique == "kels" else wels_split(g, 0.5, SeededRng(3))
    save_mask(m, tmp_path / "mask.json")
    back = load_mask(tmp_path / "mask.json")
    assert back.technique == m.technique and back.split_rate == m.split_rate
    assert back.specs == m.specs

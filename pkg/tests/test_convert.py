import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloaknet import models
from cloaknet.convert import (
    canonicalize,
    convert,
    convert_step1,
    convert_step2,
    find_secret_fields,
    part_a_linear_params,
    split,
)
from cloaknet.errors import UnknownLayer
from cloaknet.graph import LayerSpec, ModelGraph, run_graph
from cloaknet.masking import generate_round_masks
from cloaknet.rng import Stream
from cloaknet.tensor import max_rel_error
from cloaknet.transform import ObfuscationParams, expanded_count


def fig4_model():
    w = Stream(0).uniform(-0.2, 0.2, (1, 1, 32, 64))
    bn = {k: Stream(1, (k,)).uniform(0.5, 1.5, (64,)) for k in ("gamma", "beta", "mean", "variance")}
    nodes = [
        LayerSpec("pw", "PWConv", ["input"], {"stride": 1, "padding": "valid"}, {"kernel": w}),
        LayerSpec("bn", "BatchNorm", ["pw"], {"epsilon": 1e-3}, bn),
        LayerSpec("relu", "ReLU6", ["bn"]),
    ]
    return ModelGraph(nodes, (4, 4, 32), "relu")


def test_fig4_shape_law():
    g1, _ = convert_step1(fig4_model(), ObfuscationParams(ratio=1.2, seed=1))
    assert g1.node("pw/obf").weights["kernel"].shape == (1, 1, 32, 76)
    g2 = convert_step2(g1)
    assert g2.kinds() == ["PWConv", "TeeShadow"]
    assert g2.nodes[1].inputs == ["pw/obf"]


def test_relu_only_model_unchanged():
    g = ModelGraph([LayerSpec("r", "ReLU6", ["input"])], (2, 2, 1), "r")
    g1, secrets = convert_step1(g, ObfuscationParams(seed=0))
    assert secrets == {}
    assert [(n.name, n.kind, n.inputs) for n in g1.nodes] == [("r", "ReLU6", ["input"])]


def test_step1_rejects_converted_kinds():
    g1, _ = convert_step1(models.fig2(), ObfuscationParams(seed=0))
    with pytest.raises(UnknownLayer):
        convert_step1(g1, ObfuscationParams(seed=0))


def test_fig2_mask_placement():
    g1, _ = convert_step1(models.fig2(), ObfuscationParams(seed=0))
    names = {n.name: n.kind for n in g1.nodes}
    convs = ["conv1", "conv3", "conv5", "conv7"]
    assert f"{convs[0]}/push" not in names and names[convs[0]] == "LinearTransform"
    for c in convs[1:]:
        assert names[f"{c}/push"] == "PushMask"
        assert names[c] == "PopMask"  # the last layer's input is masked, so its PopMask stays
    assert g1.kinds().count("PushMask") == 3


def test_conv_rule_order():
    g1, _ = convert_step1(models.fig2(), ObfuscationParams(seed=0))
    kinds = [n.kind for n in g1.nodes if n.attrs.get("layer") == "conv3"]
    assert kinds == ["PushMask", "Conv", "LinearTransform", "PopMask"]


def test_depthwise_rule_order():
    g = next(g for g in map(models.random_model, range(100)) if "DWConv" in g.kinds())
    g1, _ = convert_step1(g, ObfuscationParams(seed=0))
    dw = next(n.name for n in g.nodes if n.kind == "DWConv")
    kinds = [n.kind for n in g1.nodes if n.attrs.get("layer") == dw]
    assert kinds == ["PushMask", "ShuffleChannel", "DWConv", "ShuffleChannel", "PopMask"]


def test_adjacent_linear_layers_get_one_shadow():
    w1 = Stream(0).uniform(-0.5, 0.5, (3, 3, 2, 4))
    w2 = Stream(1).uniform(-0.5, 0.5, (1, 1, 4, 3))
    nodes = [
        LayerSpec("a", "Conv", ["input"], {"stride": 1, "padding": "same"}, {"kernel": w1}),
        LayerSpec("b", "Conv", ["a"], {"stride": 1, "padding": "valid"}, {"kernel": w2}),
    ]
    g2 = convert_step2(convert_step1(ModelGraph(nodes, (5, 5, 2), "b"), ObfuscationParams(seed=0))[0])
    assert g2.kinds() == ["Conv", "TeeShadow", "Conv", "TeeShadow"]
    body = [n.kind for n in g2.nodes[1].attrs["body"]]
    assert body == ["LinearTransform", "PushMask"]


def test_shortcut_yields_one_merge():
    g2 = convert_step2(convert_step1(models.shortcut(), ObfuscationParams(seed=0))[0])
    merges = [n for n in g2.nodes if n.kind == "TeeMerge"]
    assert len(merges) == 1 and len(merges[0].inputs) == 2


def test_residual_routes_carry_through_normal_world():
    g1, _ = convert_step1(models.residual(), ObfuscationParams(seed=0))
    carries = [n for n in g1.nodes if n.attrs.get("carry")]
    assert [n.kind for n in carries] == ["PushMask", "PopMask"]
    assert carries[1].attrs["op"] == "identity"
    g2 = convert_step2(g1)
    merge = next(n for n in g2.nodes if n.kind == "TeeMerge")
    assert carries[0].name in merge.inputs


def test_dense_canonicalized():
    g = canonicalize(models.minivgg_toy())
    assert "Dense" not in g.kinds()
    fc = [n for n in g.nodes if n.attrs.get("dense")]
    assert [n.weights["kernel"].shape for n in fc] == [(1, 1, 64, 512), (1, 1, 512, 10)]


def test_part_a_has_no_secrets():
    part_a, part_b, _ = convert(models.minivgg_toy(), ObfuscationParams(seed=2))
    assert find_secret_fields(part_a) == []
    assert set(part_a.kinds()) <= {"Conv", "PWConv", "DWConv", "TeeShadow", "TeeMerge"}
    assert find_secret_fields(part_b.regions)  # sanity: the scanner does see secrets when present


def test_part_a_weight_bytes_ratio():
    g = models.fig2()
    part_a, _, secrets = convert(g, ObfuscationParams(ratio=1.5, seed=0))
    for node in g.nodes:
        if node.kind == "Conv":
            published = part_a.node(f"{node.name}/obf").weights["kernel"]
            n = node.weights["kernel"].shape[3]
            assert published.nbytes * n == node.weights["kernel"].nbytes * expanded_count(n, 1.5)


@pytest.mark.parametrize("ratio", [1.0, 1.2, 1.4, 1.6, 1.8, 2.0])
def test_part_a_volume_law(ratio):
    g = canonicalize(models.minivgg_toy())
    part_a, _, _ = convert(g, ObfuscationParams(ratio=ratio, seed=0))
    expect = sum(
        expanded_count(n.weights["kernel"].shape[3], ratio) * int(np.prod(n.weights["kernel"].shape[:3]))
        for n in g.nodes
        if n.kind in ("Conv", "PWConv")
    )
    assert part_a_linear_params(part_a) == expect


def run_converted(g, seed, x):
    params = ObfuscationParams(seed=seed)
    g1, _ = convert_step1(g, params)
    g2 = convert_step2(g1)
    _, part_b = split(g2)
    masks = generate_round_masks(part_b, Stream(seed, ("masks",)))
    return run_graph(g1, x, masks), run_graph(g2, x, masks)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_semantic_preservation(seed):
    g = models.random_model(seed)
    x = Stream(seed, ("x",)).uniform(-1, 1, g.input_shape)
    ref = run_graph(g, x)
    y1, y2 = run_converted(g, seed, x)
    assert max_rel_error(y1, ref) <= 1e-4
    np.testing.assert_array_equal(y1, y2)


def test_random_models_cover_every_kind():
    seen = set()
    for seed in range(40):
        seen.update(models.random_model(seed).kinds())
    assert seen == {"Conv", "DWConv", "PWConv", "Dense", "BatchNorm", "ReLU6", "AvgPool", "MaxPool", "Softmax", "Add"}


@pytest.mark.parametrize("name", sorted(models.NAMED))
def test_named_models_preserved(name):
    g = models.named_model(name, 3)
    x = Stream(3, ("x",)).uniform(-1, 1, g.input_shape)
    y1, _ = run_converted(g, 3, x)
    assert max_rel_error(y1, run_graph(g, x)) <= 1e-4

import numpy as np
import pytest

from cloaknet import models
from cloaknet.convert import convert
from cloaknet.errors import GraphError, ShapeError, UnknownLayer
from cloaknet.graph import LayerSpec, ModelGraph, infer_shapes, run_graph
from cloaknet.masking import MaskSpec, ZeroMasks, generate_round_masks, pop_mask, push_mask
from cloaknet.rng import Stream
from cloaknet.tensor import ConvFilter, conv2d, max_rel_error
from cloaknet.transform import ObfuscationParams, gen_conv_secret, restore_conv_output, transform_conv
from oracles import conv_naive

f32 = np.float32


def relu_model():
    return ModelGraph([LayerSpec("r", "ReLU6", ["input"])], (2, 2, 1), "r")


def test_run_single_relu():
    x = np.array([-1, 3, 9, 0], f32).reshape(2, 2, 1)
    np.testing.assert_array_equal(run_graph(relu_model(), x).ravel(), [0, 3, 6, 0])


def test_shapes_of_named_models():
    shapes = infer_shapes(models.fig2())
    assert shapes["conv7"] == (10, 10, 10)
    g = models.minivgg_toy()
    assert infer_shapes(g)[g.output] == (1, 1, 10)


def test_graph_validation():
    with pytest.raises(GraphError):
        ModelGraph([LayerSpec("r", "ReLU6", ["missing"])], (2, 2, 1), "r")
    with pytest.raises(GraphError):
        ModelGraph([LayerSpec("r", "ReLU6", ["input"]), LayerSpec("r", "ReLU6", ["input"])], (2, 2, 1), "r")
    with pytest.raises(GraphError):
        ModelGraph([LayerSpec("r", "ReLU6", ["input"])], (2, 2, 1), "nowhere")
    with pytest.raises(GraphError):
        LayerSpec("c", "Conv", ["input"], {"stride": 1})
    with pytest.raises(UnknownLayer):
        LayerSpec("x", "Gelu", ["input"])


def test_run_graph_checks_input_shape():
    with pytest.raises(ShapeError):
        run_graph(relu_model(), np.zeros((3, 2, 1), f32))


def test_push_pop_examples(nprng):
    x = nprng.standard_normal((3, 3, 2)).astype(f32)
    zero = np.zeros_like(x)
    np.testing.assert_array_equal(push_mask(x, zero), x)
    np.testing.assert_array_equal(pop_mask(x, zero), x)
    m = nprng.standard_normal((3, 3, 2)).astype(f32)
    np.testing.assert_array_equal(push_mask(zero, m), m)
    with pytest.raises(ShapeError):
        push_mask(x, m[:2])
    with pytest.raises(ShapeError):
        pop_mask(x, m[..., :1])


def test_masked_layer_round_trip(nprng):
    X = nprng.uniform(-1, 1, (6, 6, 3)).astype(f32)
    M = nprng.uniform(-1, 1, (6, 6, 3)).astype(f32)
    W = ConvFilter(nprng.uniform(-1, 1, (3, 3, 3, 5)).astype(f32))
    s = gen_conv_secret(5, (3, 3, 3), ObfuscationParams(seed=4))
    y_restored = restore_conv_output(conv2d(push_mask(X, M), transform_conv(W, s)), s)
    assert max_rel_error(pop_mask(y_restored, conv2d(M, W)), conv2d(X, W)) <= 1e-4


def fig2_parts(seed=0):
    return convert(models.fig2(seed), ObfuscationParams(seed=seed))


def test_masks_fresh_each_round():
    _, part_b, _ = fig2_parts()
    specs = part_b.mask_specs()
    assert len(specs) == 3  # every conv except the first
    r1 = generate_round_masks(part_b, Stream(1), round_id=1)
    r2 = generate_round_masks(part_b, Stream(1), round_id=2)
    for spec in specs:
        assert not np.array_equal(r1.mask(spec.mask_id), r2.mask(spec.mask_id))
        assert r1.mask(spec.mask_id).shape == spec.shape


def test_masks_deterministic_per_round():
    _, part_b, _ = fig2_parts()
    a = generate_round_masks(part_b, Stream(3), round_id=5)
    b = generate_round_masks(part_b, Stream(3), round_id=5)
    for k in a.masks:
        assert a.masks[k].tobytes() == b.masks[k].tobytes()
        assert a.unmasks[k].tobytes() == b.unmasks[k].tobytes()


def test_unmask_term_matches_conv_oracle():
    _, part_b, _ = fig2_parts()
    state = generate_round_masks(part_b, Stream(2))
    for spec in part_b.mask_specs():
        pop = spec.pop
        expect = conv_naive(
            state.mask(spec.mask_id), pop.weights["original_kernel"], pop.attrs["stride"], pop.attrs["padding"]
        )
        np.testing.assert_array_equal(state.unmask(spec.mask_id), expect)
        assert state.unmask(spec.mask_id).shape == spec.unmask_shape


def test_refill_in_place():
    _, part_b, _ = fig2_parts()
    state = generate_round_masks(part_b, Stream(2), round_id=1)
    arrays = {k: id(v) for k, v in state.masks.items()}
    before = {k: v.copy() for k, v in state.masks.items()}
    generate_round_masks(part_b, Stream(2), round_id=2, into=state)
    assert state.round_id == 2
    for k, v in state.masks.items():
        assert id(v) == arrays[k]
        assert not np.array_equal(v, before[k])


def test_zero_masks_are_exact():
    g = models.fig2(1)
    _, part_b, _ = convert(g, ObfuscationParams(seed=1))
    from cloaknet.convert import convert_step1, convert_step2

    g2 = convert_step2(convert_step1(g, ObfuscationParams(seed=1))[0])
    x = Stream(0).uniform(-1, 1, g.input_shape)
    zero = generate_round_masks(part_b, Stream(0), scale=0.0)
    assert all(not m.any() for m in zero.masks.values())
    np.testing.assert_array_equal(run_graph(g2, x, zero), run_graph(g2, x, ZeroMasks()))


def test_identity_carry_unmask_is_mask():
    pop = LayerSpec("p", "PopMask", ["t"], {"mask": "c", "op": "identity"})
    state = generate_round_masks([MaskSpec("c", (2, 2, 3), pop)], Stream(0))
    np.testing.assert_array_equal(state.mask("c"), state.unmask("c"))

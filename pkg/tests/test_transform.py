import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloaknet.errors import InvalidParams, ShapeError
from cloaknet.rng import Stream
from cloaknet.tensor import ConvFilter, DWFilter, conv2d, dense, dwconv2d, max_rel_error, pointwise_conv
from cloaknet.transform import (
    ConvTransformSecret,
    DWTransformSecret,
    ObfuscationParams,
    dw_restore_output,
    dw_transform_input,
    expanded_count,
    gen_conv_secret,
    gen_dw_secret,
    invert_permutation,
    restore_conv_output,
    restore_dense_output,
    shuffle_channels,
    transform_conv,
    transform_dense,
    transform_dwconv,
)

f32 = np.float32


def rand(rng, *shape):
    return rng.uniform(-1, 1, shape).astype(f32)


def test_expansion_matches_published_example():
    assert expanded_count(64, 1.2) == 76
    s = gen_conv_secret(64, (1, 1, 32), ObfuscationParams(ratio=1.2, seed=1))
    assert s.m == 76 and s.mask_filter.shape == (1, 1, 32, 12)


def test_ratio_one_is_degenerate():
    s = gen_conv_secret(10, (3, 3, 2), ObfuscationParams(ratio=1.0, seed=2))
    assert s.m == 10 and s.mask_filter.shape[3] == 0 and s.extra == 0


def test_ratio_two_doubles():
    s = gen_conv_secret(3, (3, 3, 1), ObfuscationParams(ratio=2.0, seed=3))
    assert s.m == 6 and s.mask_filter.shape[3] == 3


def test_expansion_is_exact_rational():
    assert expanded_count(10, 1.2) == 12  # 1.2 * 10 is 12.000000000000002 in floats
    assert [expanded_count(5, r) for r in (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)] == [5, 6, 7, 8, 9, 10]


def test_bad_params():
    with pytest.raises(InvalidParams):
        ObfuscationParams(ratio=0.9)
    with pytest.raises(InvalidParams):
        ObfuscationParams(scalar_floor=2.0, scalar_bound=1.0)
    with pytest.raises(InvalidParams):
        gen_conv_secret(0, (1, 1, 1), ObfuscationParams())


def test_scalars_respect_bounds():
    p = ObfuscationParams(ratio=1.5, scalar_floor=0.05, scalar_bound=1.0, seed=9)
    s = gen_conv_secret(500, (1, 1, 1), p)
    mags = np.abs(s.lambdas)
    assert mags.min() >= 0.05 and mags.max() <= 1.0
    assert (s.lambdas < 0).any() and (s.lambdas > 0).any()
    assert s.index.min() >= 0 and s.index.max() < s.extra


def test_secret_determinism():
    p = ObfuscationParams(ratio=1.3, seed=77)
    a = gen_conv_secret(7, (3, 3, 2), p)
    b = gen_conv_secret(7, (3, 3, 2), p)
    for name in ("lambdas", "mask_filter", "index", "perm"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    W = ConvFilter(rand(np.random.default_rng(0), 3, 3, 2, 7))
    assert transform_conv(W, a).kernels.tobytes() == transform_conv(W, b).kernels.tobytes()
    c = gen_conv_secret(7, (3, 3, 2), ObfuscationParams(ratio=1.3, seed=78))
    assert c.lambdas.tobytes() != a.lambdas.tobytes()


def test_hand_example_single_kernel(nprng):
    w = rand(nprng, 3, 3, 2, 1)
    f = rand(nprng, 3, 3, 2, 1)
    s = ConvTransformSecret(np.array([2], f32), f, [0], [0, 1])
    what = transform_conv(ConvFilter(w), s).kernels
    np.testing.assert_array_equal(what[..., 0], 2 * w[..., 0] + f[..., 0])
    np.testing.assert_array_equal(what[..., 1], f[..., 0])
    np.testing.assert_array_equal(s.restore_filter()[0, 0], [[0.5], [-0.5]])
    X = rand(nprng, 5, 5, 2)
    y = restore_conv_output(conv2d(X, ConvFilter(what)), s)
    assert max_rel_error(y, conv2d(X, ConvFilter(w))) <= 1e-5


def test_ratio_one_unit_scalars_is_shuffle(nprng):
    w = rand(nprng, 1, 1, 3, 4)
    s = ConvTransformSecret(np.ones(4, f32), np.zeros((1, 1, 3, 0), f32), [], [2, 0, 3, 1])
    what = transform_conv(ConvFilter(w), s).kernels
    for i in range(4):
        np.testing.assert_array_equal(what[..., s.perm[i]], w[..., i])
    ident = ConvTransformSecret(np.ones(4, f32), np.zeros((1, 1, 3, 0), f32), [], [0, 1, 2, 3])
    np.testing.assert_array_equal(ident.restore_filter()[0, 0], np.eye(4))
    yhat = rand(nprng, 2, 2, 4)
    np.testing.assert_array_equal(restore_conv_output(yhat, ident), yhat)


def reevaluate(W, s):
    """Column-by-column re-evaluation of the expansion with explicit loops."""
    kh, kw, cin, n = W.shape
    out = np.zeros((kh, kw, cin, s.m), f32)
    for i in range(n):
        col = W[..., i] * s.lambdas[i]
        if s.extra:
            col = col + s.mask_filter[..., s.index[i]]
        out[..., s.perm[i]] = col
    for j in range(s.extra):
        out[..., s.perm[n + j]] = s.mask_filter[..., j]
    return out


def test_transform_matches_reevaluation(nprng):
    W = rand(nprng, 3, 3, 4, 9)
    s = gen_conv_secret(9, (3, 3, 4), ObfuscationParams(ratio=1.6, seed=5))
    what = transform_conv(ConvFilter(W, 2, "same"), s)
    assert what.stride == 2 and what.padding == "same"
    np.testing.assert_array_equal(what.kernels, reevaluate(W, s))


def test_restore_sparsity():
    s = gen_conv_secret(8, (3, 3, 2), ObfuscationParams(ratio=1.5, seed=6))
    r = s.restore_filter()[0, 0]
    assert np.count_nonzero(r) <= 2 * s.n
    assert all(np.count_nonzero(r[:, i]) == 2 for i in range(s.n))
    s1 = gen_conv_secret(8, (3, 3, 2), ObfuscationParams(ratio=1.0, seed=6))
    assert all(np.count_nonzero(s1.restore_filter()[0, 0][:, i]) == 1 for i in range(8))


def test_restore_checks_channels(nprng):
    s = gen_conv_secret(4, (1, 1, 2), ObfuscationParams(ratio=1.5, seed=1))
    with pytest.raises(ShapeError):
        restore_conv_output(rand(nprng, 2, 2, 5), s)
    with pytest.raises(ShapeError):
        transform_conv(ConvFilter(rand(nprng, 3, 3, 2, 4)), s)


def test_permutation_soundness():
    perm = Stream(4).permutation(50)
    inv = invert_permutation(perm)
    x = np.arange(50.0).reshape(1, 1, 50)
    np.testing.assert_array_equal(shuffle_channels(shuffle_channels(x, perm), perm, inverse=True), x)
    np.testing.assert_array_equal(perm[inv], np.arange(50))


def test_dw_identity_secret(nprng):
    s = DWTransformSecret(np.ones(3, f32), [0, 1, 2])
    x, w = rand(nprng, 4, 4, 3), rand(nprng, 3, 3, 3)
    np.testing.assert_array_equal(dw_transform_input(x, s), x)
    np.testing.assert_array_equal(transform_dwconv(DWFilter(w), s).kernels, w)
    np.testing.assert_array_equal(dw_restore_output(x, s), x)


def test_dw_hand_example(nprng):
    a, b = f32(3.0), f32(-5.0)
    s = DWTransformSecret(np.array([2, 4], f32), [1, 0])
    np.testing.assert_array_equal(dw_transform_input(np.array([[[a, b]]], f32), s), [[[b / 4, a / 2]]])
    w = rand(nprng, 3, 3, 2)
    what = transform_dwconv(DWFilter(w), s).kernels
    np.testing.assert_array_equal(what[..., 0], 4 * w[..., 1])
    np.testing.assert_array_equal(what[..., 1], 2 * w[..., 0])
    x = rand(nprng, 5, 5, 2)
    y = dw_restore_output(dwconv2d(dw_transform_input(x, s), DWFilter(what)), s)
    assert max_rel_error(y, dwconv2d(x, DWFilter(w))) <= 1e-6
    np.testing.assert_allclose(s.input_matrix() @ s.weight_matrix().T, np.eye(2))


def test_dw_matrices_inverse():
    s = gen_dw_secret(12, ObfuscationParams(seed=3))
    np.testing.assert_allclose(s.input_matrix() @ s.weight_matrix().T, np.eye(12), atol=1e-12)


def test_dense_transform_mirrors_pointwise(nprng):
    s = gen_conv_secret(6, (1, 1, 10), ObfuscationParams(ratio=1.5, seed=8))
    W = rand(nprng, 10, 6)
    what = transform_dense(W, s)
    assert what.shape == (10, 9)
    np.testing.assert_array_equal(what, transform_conv(ConvFilter(W.reshape(1, 1, 10, 6)), s).kernels.reshape(10, 9))
    x = rand(nprng, 10)
    assert max_rel_error(restore_dense_output(dense(x, what), s), dense(x, W)) <= 1e-4


@settings(max_examples=150, deadline=None)
@given(
    seed=st.integers(0, 2**63 - 1),
    n=st.integers(1, 8),
    cin=st.integers(1, 4),
    k=st.sampled_from([1, 2, 3]),
    ratio=st.sampled_from([1.0, 1.2, 1.5, 2.0, 3.0]),
)
def test_conv_round_trip(seed, n, cin, k, ratio):
    rng = np.random.default_rng(seed % 2**32)
    X, W = rand(rng, 5, 5, cin), rand(rng, k, k, cin, n)
    s = gen_conv_secret(n, (k, k, cin), ObfuscationParams(ratio=ratio, seed=seed))
    what = transform_conv(ConvFilter(W), s)
    assert what.n == expanded_count(n, ratio)
    y = restore_conv_output(conv2d(X, what), s)
    assert max_rel_error(y, conv2d(X, ConvFilter(W))) <= 1e-4
    y_pw = restore_conv_output(pointwise_conv(X, ConvFilter(what.kernels[:1, :1])), s) if k == 1 else None
    if y_pw is not None:
        assert max_rel_error(y_pw, pointwise_conv(X, ConvFilter(W))) <= 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**63 - 1), n=st.integers(1, 8))
def test_dw_round_trip(seed, n):
    rng = np.random.default_rng(seed % 2**32)
    X, W = rand(rng, 6, 6, n), rand(rng, 3, 3, n)
    s = gen_dw_secret(n, ObfuscationParams(seed=seed))
    y = dw_restore_output(dwconv2d(dw_transform_input(X, s), transform_dwconv(DWFilter(W), s)), s)
    assert max_rel_error(y, dwconv2d(X, DWFilter(W))) <= 1e-4


def test_dyadic_round_trip_is_bitwise():
    rng = Stream(11)
    p = ObfuscationParams(ratio=1.5, seed=11, dyadic=True)
    for trial in range(20):
        X = (rng.integers(513, 4 * 5 * 5).reshape(5, 5, 4) - 256) / 128.0
        W = (rng.integers(513, 3 * 3 * 4 * 6).reshape(3, 3, 4, 6) - 256) / 256.0
        s = gen_conv_secret(6, (3, 3, 4), p, rng.child(trial), dtype=np.float64)
        y = restore_conv_output(conv2d(X, transform_conv(ConvFilter(W), s)), s)
        assert np.array_equal(y, conv2d(X, ConvFilter(W)))

"""Obfuscating transformations for linear layers and their restoration.

Standard, pointwise and dense layers are expanded from ``n`` to ``m`` kernels:
each real kernel is scaled by a secret scalar and offset by one of ``m - n``
random mask kernels, the mask kernels themselves are appended, and the whole
bank is shuffled.  Position ``perm[j]`` of the published filter holds
expanded kernel ``j``.  The secure side undoes this with a sparse 1x1
convolution (``restore_filter``).

Depthwise layers keep their ``n`` kernels: kernel ``i`` is scaled by
``lambda_i`` and moved to channel ``perm[i]``; the layer input gets the
matching ``1 / lambda_i`` scale and the same shuffle, and the output is
gathered back through the inverse shuffle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InvalidParams, ShapeError
from .rng import Stream, as_stream
from .tensor import ConvFilter, DWFilter, pointwise_conv

DYADIC_GRID = 256  # mask entries in dyadic mode are multiples of 1/256


@dataclass(frozen=True)
class ObfuscationParams:
    """Knobs for secret generation.

    ``dyadic`` draws scalars as signed powers of two and mask kernels on a
    1/256 grid.  Combined with dyadic inputs this keeps every float64
    operation exact, which is what the bitwise reference mode relies on.
    """

    ratio: float = 1.2
    scalar_bound: float = 1.0
    scalar_floor: float = 0.05
    seed: int = 0
    dyadic: bool = False

    def __post_init__(self):
        if not self.ratio >= 1:
            raise InvalidParams(f"obfuscation ratio must be >= 1, got {self.ratio}")
        if not 0 < self.scalar_floor < self.scalar_bound:
            raise InvalidParams(
                f"need 0 < scalar_floor < scalar_bound, got {self.scalar_floor} and {self.scalar_bound}"
            )


def expanded_count(n: int, ratio: float) -> int:
    """Number of published kernels for a layer with ``n`` real kernels.

    ``floor(ratio * n)`` in exact rational arithmetic, so 64 kernels at
    ratio 1.2 expand to 76 and 10 kernels at 1.2 expand to exactly 12.
    """
    if ratio < 1:
        raise InvalidParams(f"obfuscation ratio must be >= 1, got {ratio}")
    exact = Fraction(str(ratio)) if isinstance(ratio, float) else Fraction(ratio)
    return max(n, math.floor(exact * n))


@dataclass
class ConvTransformSecret:
    lambdas: np.ndarray  # (n,)
    mask_filter: np.ndarray  # (kh, kw, cin, m - n)
    index: np.ndarray  # (n,) ints in [0, m - n); unused when m == n
    perm: np.ndarray  # (m,) published position of expanded kernel j

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas)
        self.index = np.asarray(self.index, dtype=np.int64)
        self.perm = np.asarray(self.perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(len(self.perm))):
            raise InvalidParams("perm is not a permutation")
        if len(self.perm) != self.n + self.mask_filter.shape[3]:
            raise InvalidParams(f"perm has {len(self.perm)} entries, expected m = {self.n + self.mask_filter.shape[3]}")
        if self.extra and (len(self.index) != self.n or self.index.min() < 0 or self.index.max() >= self.extra):
            raise InvalidParams("index entries must select one of the mask kernels")

    @property
    def n(self) -> int:
        return len(self.lambdas)

    @property
    def m(self) -> int:
        return len(self.perm)

    @property
    def extra(self) -> int:
        return self.m - self.n

    def restore_filter(self, dtype=np.float32) -> np.ndarray:
        """``(1, 1, m, n)`` mixing matrix that maps the published outputs back."""
        dt = np.dtype(dtype).type
        r = np.zeros((1, 1, self.m, self.n), dtype=dtype)
        for i in range(self.n):
            inv = dt(1) / dt(self.lambdas[i])
            r[0, 0, self.perm[i], i] = inv
            if self.extra:
                r[0, 0, self.perm[self.n + self.index[i]], i] = -inv
        return r


@dataclass
class DWTransformSecret:
    lambdas: np.ndarray  # (n,)
    perm: np.ndarray  # (n,) channel i moves to perm[i]

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas)
        self.perm = np.asarray(self.perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(len(self.lambdas))):
            raise InvalidParams("perm is not a permutation of the channels")

    @property
    def n(self) -> int:
        return len(self.lambdas)

    def weight_matrix(self) -> np.ndarray:
        """diag(lambda) @ P, with P[i, perm[i]] = 1."""
        return np.diag(self.lambdas.astype(np.float64)) @ permutation_matrix(self.perm)

    def input_matrix(self) -> np.ndarray:
        """diag(1 / lambda) @ P; ``input_matrix() @ weight_matrix().T`` is the identity."""
        return np.diag(1.0 / self.lambdas.astype(np.float64)) @ permutation_matrix(self.perm)


@dataclass
class _Draws:
    """Per-layer child streams, so each secret component is drawn independently."""

    rng: Stream
    streams: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Stream:
        if name not in self.streams:
            self.streams[name] = self.rng.child(name)
        return self.streams[name]


def permutation_matrix(perm) -> np.ndarray:
    perm = np.asarray(perm)
    p = np.zeros((len(perm), len(perm)))
    p[np.arange(len(perm)), perm] = 1
    return p


def invert_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def sample_scalars(n: int, params: ObfuscationParams, rng: Stream, dtype=np.float32) -> np.ndarray:
    """``n`` scalars with magnitude in ``[scalar_floor, scalar_bound]`` and random sign."""
    signs = rng.signs(n)
    if params.dyadic:
        lo = math.ceil(math.log2(params.scalar_floor))
        hi = math.floor(math.log2(params.scalar_bound))
        if lo > hi:
            raise InvalidParams("no power of two lies in [scalar_floor, scalar_bound]")
        mags = np.ldexp(1.0, rng.integers(hi - lo + 1, n) + lo)
    else:
        mags = rng.uniform(params.scalar_floor, params.scalar_bound, (n,), dtype=np.float64)
    return (signs * mags).astype(dtype)


def sample_mask_kernels(shape, params: ObfuscationParams, rng: Stream, dtype=np.float32, scale: float = 1.0) -> np.ndarray:
    t = params.scalar_bound * scale
    if params.dyadic:
        steps = int(t * DYADIC_GRID)
        count = int(np.prod(shape, dtype=np.int64))
        vals = (rng.integers(2 * steps + 1, count) - steps) / DYADIC_GRID
        return vals.reshape(shape).astype(dtype)
    return rng.uniform(-t, t, shape, dtype=dtype)


def gen_conv_secret(
    n: int, kernel_shape, params: ObfuscationParams, rng=None, dtype=np.float32, mask_scale: float = 1.0
) -> ConvTransformSecret:
    """Draw the secret for a layer with ``n`` kernels of shape ``(kh, kw, cin)``.

    Mask kernel entries are uniform in ``[-t * mask_scale, t * mask_scale]``.
    The converter passes the layer's largest weight magnitude as ``mask_scale``
    so decoys and scaled kernels live on the same scale.
    """
    if n < 1:
        raise InvalidParams("a layer needs at least one kernel")
    draws = _Draws(as_stream(params.seed if rng is None else rng))
    m = expanded_count(n, params.ratio)
    extra = m - n
    lambdas = sample_scalars(n, params, draws["lambda"], dtype)
    mask = sample_mask_kernels(tuple(kernel_shape) + (extra,), params, draws["mask"], dtype, mask_scale)
    index = draws["index"].integers(extra, n) if extra else np.zeros(0, dtype=np.int64)
    perm = draws["perm"].permutation(m)
    return ConvTransformSecret(lambdas, mask, index, perm)


def gen_dw_secret(n: int, params: ObfuscationParams, rng=None, dtype=np.float32) -> DWTransformSecret:
    if n < 1:
        raise InvalidParams("a layer needs at least one kernel")
    draws = _Draws(as_stream(params.seed if rng is None else rng))
    return DWTransformSecret(sample_scalars(n, params, draws["lambda"], dtype), draws["perm"].permutation(n))


def expand_kernels(kernels: np.ndarray, s: ConvTransformSecret) -> np.ndarray:
    """Unshuffled expanded bank: scaled-plus-mask kernels, then the mask kernels."""
    if kernels.shape[3] != s.n:
        raise ShapeError(f"filter has {kernels.shape[3]} kernels, secret expects {s.n}", "n")
    if s.extra and kernels.shape[:3] != s.mask_filter.shape[:3]:
        raise ShapeError(
            f"kernel shape {kernels.shape[:3]} does not match mask kernels {s.mask_filter.shape[:3]}", "kernel"
        )
    dt = kernels.dtype
    scaled = kernels * s.lambdas.astype(dt)
    if not s.extra:
        return scaled
    mask = s.mask_filter.astype(dt)
    return np.concatenate([scaled + mask[..., s.index], mask], axis=3)


def transform_conv(W: ConvFilter, s: ConvTransformSecret) -> ConvFilter:
    expanded = expand_kernels(W.kernels, s)
    published = np.empty_like(expanded)
    published[..., s.perm] = expanded
    return ConvFilter(published, W.stride, W.padding)


def restore_conv_output(yhat: np.ndarray, s: ConvTransformSecret, out: np.ndarray | None = None) -> np.ndarray:
    if yhat.shape[-1] != s.m:
        raise ShapeError(f"expected {s.m} channels from the obfuscated layer, got {yhat.shape[-1]}", "c")
    return pointwise_conv(yhat, ConvFilter(s.restore_filter(yhat.dtype)), out=out)


def transform_dense(weights: np.ndarray, s: ConvTransformSecret) -> np.ndarray:
    n_in, n_out = weights.shape
    w = transform_conv(ConvFilter(weights.reshape(1, 1, n_in, n_out)), s)
    return w.kernels.reshape(n_in, s.m)


def restore_dense_output(yhat: np.ndarray, s: ConvTransformSecret) -> np.ndarray:
    return restore_conv_output(yhat.reshape(1, 1, -1), s).reshape(s.n)


def shuffle_channels(x: np.ndarray, perm, divisors=None, inverse: bool = False, out=None) -> np.ndarray:
    """Channel scatter ``out[..., perm[i]] = x[..., i] / divisors[i]``, or the gather
    ``out[..., i] = x[..., perm[i]]`` when ``inverse`` is set."""
    perm = np.asarray(perm)
    if x.shape[-1] != len(perm):
        raise ShapeError(f"input has {x.shape[-1]} channels, shuffle expects {len(perm)}", "c")
    if out is None:
        out = np.empty_like(x)
    if inverse:
        np.take(x, perm, axis=-1, out=out)
        if divisors is not None:
            np.divide(out, np.asarray(divisors, dtype=x.dtype), out=out)
        return out
    if divisors is None:
        out[..., perm] = x
    else:
        out[..., perm] = x / np.asarray(divisors, dtype=x.dtype)
    return out


def transform_dwconv(W: DWFilter, s: DWTransformSecret) -> DWFilter:
    if W.c != s.n:
        raise ShapeError(f"depthwise filter has {W.c} channels, secret expects {s.n}", "c")
    dt = W.kernels.dtype
    published = np.empty_like(W.kernels)
    published[..., s.perm] = W.kernels * s.lambdas.astype(dt)
    return DWFilter(published, W.stride, W.padding)


def dw_transform_input(x: np.ndarray, s: DWTransformSecret, out=None) -> np.ndarray:
    return shuffle_channels(x, s.perm, s.lambdas, out=out)


def dw_restore_output(y: np.ndarray, s: DWTransformSecret, out=None) -> np.ndarray:
    return shuffle_channels(y, s.perm, inverse=True, out=out)

"""Dense HWC tensors and the reference CNN kernels both worlds execute.

Activations are plain numpy arrays of shape ``(h, w, c)``; filter banks are
``(kh, kw, cin, n)``.  Every reduction accumulates in the fixed order
kernel-row -> kernel-column -> input-channel, one rounding per multiply and
one per add, so a scalar loop written in that order reproduces the kernels
bit for bit.  ``float32`` is the working precision; ``float64`` inputs are
accepted and stay in ``float64``.

Kernels that run inside the secure world take an optional ``out`` array so
they can write into preallocated buffers instead of allocating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

PADDINGS = ("valid", "same")


@dataclass
class ConvFilter:
    kernels: np.ndarray  # (kh, kw, cin, n)
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise ShapeError(f"conv kernels must be rank 4, got shape {self.kernels.shape}", "rank")
        if self.kernels.shape[3] < 1:
            raise ShapeError("conv filter needs at least one kernel", "n")
        _check_geometry(self.stride, self.padding)

    @property
    def kh(self) -> int:
        return self.kernels.shape[0]

    @property
    def kw(self) -> int:
        return self.kernels.shape[1]

    @property
    def cin(self) -> int:
        return self.kernels.shape[2]

    @property
    def n(self) -> int:
        return self.kernels.shape[3]


@dataclass
class DWFilter:
    kernels: np.ndarray  # (kh, kw, c)
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kernels.ndim != 3:
            raise ShapeError(f"depthwise kernels must be rank 3, got shape {self.kernels.shape}", "rank")
        _check_geometry(self.stride, self.padding)

    @property
    def c(self) -> int:
        return self.kernels.shape[2]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    epsilon: float = 1e-3

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "mean", "variance"):
            if len(getattr(self, name)) != c:
                raise ShapeError(f"batchnorm {name} has length {len(getattr(self, name))}, expected {c}", name)
        if np.any(np.asarray(self.variance) < 0):
            raise ValueError("batchnorm variance must be non-negative")


def _check_geometry(stride: int, padding: str) -> None:
    if int(stride) < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding not in PADDINGS:
        raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")


def _check_hwc(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 3:
        raise ShapeError(f"{what} must be an (h, w, c) tensor, got shape {x.shape}", "rank")


def output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if size < k:
        raise ShapeError(f"spatial size {size} smaller than kernel {k} under valid padding", "spatial")
    return (size - k) // stride + 1


def _pad_amounts(size: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    total = max((output_size(size, k, stride, padding) - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv_output_shape(in_shape, kh: int, kw: int, n: int, stride: int, padding: str) -> tuple[int, int, int]:
    h, w = in_shape[0], in_shape[1]
    return output_size(h, kh, stride, padding), output_size(w, kw, stride, padding), n


def _padded(x: np.ndarray, kh: int, kw: int, stride: int, padding: str) -> np.ndarray:
    top, bottom = _pad_amounts(x.shape[0], kh, stride, padding)
    left, right = _pad_amounts(x.shape[1], kw, stride, padding)
    if top == bottom == left == right == 0:
        return x
    return np.pad(x, ((top, bottom), (left, right), (0, 0)))


def _window(xp: np.ndarray, i: int, j: int, oh: int, ow: int, stride: int) -> np.ndarray:
    return xp[i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride]


def _prepare_out(out, shape, dtype):
    if out is None:
        return np.zeros(shape, dtype=dtype)
    if out.shape != tuple(shape):
        raise ShapeError(f"output buffer has shape {out.shape}, expected {tuple(shape)}", "out")
    out[...] = 0
    return out


def conv2d(x: np.ndarray, f: ConvFilter) -> np.ndarray:
    _check_hwc(x)
    if x.shape[2] != f.cin:
        raise ShapeError(f"input has {x.shape[2]} channels but filter expects cin={f.cin}", "cin")
    oh, ow, n = conv_output_shape(x.shape, f.kh, f.kw, f.n, f.stride, f.padding)
    xp = _padded(x, f.kh, f.kw, f.stride, f.padding)
    w = f.kernels
    acc = np.zeros((oh, ow, n), dtype=np.result_type(x, w))
    for i in range(f.kh):
        for j in range(f.kw):
            win = _window(xp, i, j, oh, ow, f.stride)
            for k in range(f.cin):
                acc += win[:, :, k, None] * w[i, j, k]
    return acc


def dwconv2d(x: np.ndarray, f: DWFilter) -> np.ndarray:
    _check_hwc(x)
    if x.shape[2] != f.c:
        raise ShapeError(f"input has {x.shape[2]} channels but depthwise filter has {f.c}", "c")
    kh, kw = f.kernels.shape[:2]
    oh, ow, c = conv_output_shape(x.shape, kh, kw, f.c, f.stride, f.padding)
    xp = _padded(x, kh, kw, f.stride, f.padding)
    acc = np.zeros((oh, ow, c), dtype=np.result_type(x, f.kernels))
    for i in range(kh):
        for j in range(kw):
            acc += _window(xp, i, j, oh, ow, f.stride) * f.kernels[i, j]
    return acc


def pointwise_conv(x: np.ndarray, f: ConvFilter, out: np.ndarray | None = None) -> np.ndarray:
    """1x1 convolution as a channel-mixing product, same accumulation order as conv2d."""
    _check_hwc(x)
    if f.kh != 1 or f.kw != 1:
        raise ShapeError(f"pointwise conv needs 1x1 kernels, got {f.kh}x{f.kw}", "kernel")
    if x.shape[2] != f.cin:
        raise ShapeError(f"input has {x.shape[2]} channels but filter expects cin={f.cin}", "cin")
    src = x[:: f.stride, :: f.stride] if f.stride > 1 else x
    mix = f.kernels[0, 0]
    acc = _prepare_out(out, src.shape[:2] + (f.n,), np.result_type(x, mix))
    for k in range(f.cin):
        acc += src[:, :, k, None] * mix[k]
    return acc


def dense(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Fully connected layer on ``n`` values with an ``(n, m)`` weight matrix.

    Evaluated as a pointwise convolution over a 1x1xn tensor; a flat input
    gives a flat ``(m,)`` result, a 1x1xn input keeps its rank.
    """
    if weights.ndim != 2:
        raise ShapeError(f"dense weights must be (n, m), got {weights.shape}", "rank")
    n, m = weights.shape
    if x.size != n:
        raise ShapeError(f"dense layer expects {n} inputs, got {x.size}", "n")
    y = pointwise_conv(x.reshape(1, 1, n), ConvFilter(weights.reshape(1, 1, n, m)))
    return y.reshape(m) if x.ndim == 1 else y


def batchnorm(x: np.ndarray, p: BatchNormParams, out: np.ndarray | None = None) -> np.ndarray:
    _check_hwc(x)
    if x.shape[2] != len(p.gamma):
        raise ShapeError(f"input has {x.shape[2]} channels, batchnorm has {len(p.gamma)}", "c")
    dt = x.dtype
    mean = np.asarray(p.mean, dtype=dt)
    denom = np.sqrt(np.asarray(p.variance, dtype=dt) + dt.type(p.epsilon))
    gamma = np.asarray(p.gamma, dtype=dt)
    beta = np.asarray(p.beta, dtype=dt)
    if out is None:
        out = np.empty_like(x)
    np.subtract(x, mean, out=out)
    np.divide(out, denom, out=out)
    np.multiply(out, gamma, out=out)
    np.add(out, beta, out=out)
    return out


def relu6(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    return np.clip(x, 0, 6, out=out)


def add(a: np.ndarray, b: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}", "shape")
    return np.add(a, b, out=out)


def _pool(x, window, stride, reducer, out):
    _check_hwc(x)
    kh, kw = window
    stride = stride or kh
    oh = output_size(x.shape[0], kh, stride, "valid")
    ow = output_size(x.shape[1], kw, stride, "valid")
    shape = (oh, ow, x.shape[2])
    if out is None:
        out = np.empty(shape, dtype=x.dtype)
    elif out.shape != shape:
        raise ShapeError(f"output buffer has shape {out.shape}, expected {shape}", "out")
    first = True
    for i in range(kh):
        for j in range(kw):
            win = _window(x, i, j, oh, ow, stride)
            if first:
                out[...] = win
                first = False
            else:
                reducer(out, win, out=out)
    return out


def max_pool(x: np.ndarray, window=(2, 2), stride: int | None = None, out=None) -> np.ndarray:
    return _pool(x, tuple(window), stride, np.maximum, out)


def avg_pool(x: np.ndarray, window=(2, 2), stride: int | None = None, out=None) -> np.ndarray:
    out = _pool(x, tuple(window), stride, np.add, out)
    np.divide(out, x.dtype.type(window[0] * window[1]), out=out)
    return out


def softmax(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the channel axis."""
    if out is None:
        out = np.empty_like(x)
    np.subtract(x, x.max(axis=-1, keepdims=True), out=out)
    np.exp(out, out=out)
    np.divide(out, out.sum(axis=-1, keepdims=True), out=out)
    return out


def max_rel_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Largest absolute deviation, relative to the largest reference magnitude."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"cannot compare shapes {actual.shape} and {expected.shape}", "shape")
    if actual.size == 0:
        return 0.0
    scale = float(np.max(np.abs(expected)))
    diff = float(np.max(np.abs(actual - expected)))
    if scale == 0.0:
        return diff
    return diff / scale

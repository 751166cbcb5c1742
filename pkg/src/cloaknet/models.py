"""Named toy models and a random model generator for tests, the CLI and benchmarks."""

from __future__ import annotations

import numpy as np

from .errors import InvalidParams
from .graph import LayerSpec, ModelGraph, infer_shapes
from .rng import Stream, as_stream


class _Builder:
    def __init__(self, rng: Stream, input_shape, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.nodes: list = []
        self.input_shape = tuple(input_shape)
        self.shapes = {"input": self.input_shape}
        self.count = 0

    def _name(self, kind: str) -> str:
        self.count += 1
        return f"{kind.lower()}{self.count}"

    def _add(self, node: LayerSpec) -> str:
        self.nodes.append(node)
        g = ModelGraph(self.nodes, self.input_shape, node.name)
        self.shapes = infer_shapes(g)
        return node.name

    def _kernel(self, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)  # He-uniform: keeps activations near unit scale
        return self.rng.child("w", self.count).uniform(-bound, bound, shape, dtype=self.dtype)

    def conv(self, x, n, k=3, stride=1, padding="same") -> str:
        name = self._name("conv")
        cin = self.shapes[x][2]
        w = self._kernel((k, k, cin, n), k * k * cin)
        return self._add(LayerSpec(name, "Conv", [x], {"stride": stride, "padding": padding}, {"kernel": w}))

    def pwconv(self, x, n) -> str:
        name = self._name("pw")
        cin = self.shapes[x][2]
        w = self._kernel((1, 1, cin, n), cin)
        return self._add(LayerSpec(name, "PWConv", [x], {"stride": 1, "padding": "valid"}, {"kernel": w}))

    def dwconv(self, x, k=3, stride=1, padding="same") -> str:
        name = self._name("dw")
        c = self.shapes[x][2]
        w = self._kernel((k, k, c), k * k)
        return self._add(LayerSpec(name, "DWConv", [x], {"stride": stride, "padding": padding}, {"kernel": w}))

    def dense(self, x, m) -> str:
        name = self._name("fc")
        n = self.shapes[x][2]
        w = self._kernel((n, m), n)
        return self._add(LayerSpec(name, "Dense", [x], {}, {"kernel": w}))

    def bn(self, x) -> str:
        name = self._name("bn")
        c = self.shapes[x][2]
        r = self.rng.child("bn", self.count)
        w = {
            "gamma": r.child("gamma").uniform(0.5, 1.5, (c,), dtype=self.dtype),
            "beta": r.child("beta").uniform(-0.5, 0.5, (c,), dtype=self.dtype),
            "mean": r.child("mean").uniform(-0.5, 0.5, (c,), dtype=self.dtype),
            "variance": r.child("var").uniform(0.5, 1.5, (c,), dtype=self.dtype),
        }
        return self._add(LayerSpec(name, "BatchNorm", [x], {"epsilon": 1e-3}, w))

    def relu6(self, x) -> str:
        return self._add(LayerSpec(self._name("relu"), "ReLU6", [x]))

    def pool(self, x, kind="MaxPool", window=2, stride=None) -> str:
        attrs = {"window": [window, window], "stride": stride or window}
        return self._add(LayerSpec(self._name(kind), kind, [x], attrs))

    def global_pool(self, x) -> str:
        h, w, _ = self.shapes[x]
        return self._add(LayerSpec(self._name("gap"), "AvgPool", [x], {"window": [h, w], "stride": max(h, w)}))

    def add(self, a, b) -> str:
        return self._add(LayerSpec(self._name("add"), "Add", [a, b]))

    def softmax(self, x) -> str:
        return self._add(LayerSpec(self._name("softmax"), "Softmax", [x]))

    def build(self, output: str) -> ModelGraph:
        return ModelGraph(self.nodes, self.input_shape, output)


def fig1(seed: int = 0) -> ModelGraph:
    """One conv + BN + ReLU6 block with 64 kernels of 3x3x3 (paper Fig. 1)."""
    b = _Builder(as_stream(seed), (8, 8, 3))
    return b.build(b.relu6(b.bn(b.conv("input", 64))))


def fig2(seed: int = 0) -> ModelGraph:
    """Four-conv CNN in the shape of paper Fig. 2."""
    b = _Builder(as_stream(seed), (12, 12, 3))
    x = b.relu6(b.conv("input", 8))
    x = b.relu6(b.conv(x, 16))
    x = b.relu6(b.conv(x, 16, padding="valid"))
    return b.build(b.conv(x, 10, k=1, padding="valid"))


def shortcut(seed: int = 0) -> ModelGraph:
    """Two branches joined by an Add (Fig. 11): converts to exactly one TeeMerge."""
    b = _Builder(as_stream(seed), (8, 8, 4))
    x = b.relu6(b.conv("input", 8))
    y = b.add(b.conv(x, 8), b.conv(x, 8, k=1))
    return b.build(b.conv(b.relu6(y), 6, k=1))


def residual(seed: int = 0) -> ModelGraph:
    """Identity shortcut around a conv block; needs a masked carry through the normal world."""
    b = _Builder(as_stream(seed), (8, 8, 4))
    x = b.relu6(b.conv("input", 8))
    y = b.relu6(b.bn(b.conv(x, 8)))
    return b.build(b.conv(b.add(x, y), 5, k=1))


def minivgg_toy(seed: int = 0) -> ModelGraph:
    """Scaled-down MiniVGG: two conv stages of 32 and 64 kernels, then dense 512 and 10."""
    b = _Builder(as_stream(seed), (16, 16, 3))
    x = "input"
    for width in (32, 64):
        x = b.relu6(b.bn(b.conv(x, width)))
        x = b.relu6(b.bn(b.conv(x, width)))
        x = b.pool(x)
    x = b.relu6(b.dense(b.global_pool(x), 512))
    return b.build(b.softmax(b.dense(x, 10)))


NAMED = {"fig1": fig1, "fig2": fig2, "shortcut": shortcut, "residual": residual, "minivgg-toy": minivgg_toy}


def named_model(name: str, seed: int = 0) -> ModelGraph:
    if name not in NAMED:
        raise InvalidParams(f"unknown model {name!r}; choose from {sorted(NAMED)}")
    return NAMED[name](seed)


def random_model(seed: int, max_blocks: int = 4, with_shortcut: bool | None = None) -> ModelGraph:
    """A small random CNN mixing every base layer kind.

    Blocks are drawn from conv, depthwise-separable, pool and residual shapes;
    the head is global average pooling, a dense layer and optionally softmax.
    """
    rng = as_stream(seed)
    pick = rng.child("shape")
    h = 4 + int(pick.integers(5, 1)[0])
    c = 1 + int(pick.integers(4, 1)[0])
    b = _Builder(rng.child("weights"), (h, h, c))
    x = "input"
    n_blocks = 1 + int(pick.integers(max_blocks, 1)[0])
    kinds = ["conv", "dwsep", "pool", "residual"]
    choices = [kinds[int(i)] for i in pick.child("blocks").integers(len(kinds), n_blocks)]
    if with_shortcut is True and "residual" not in choices:
        choices[-1] = "residual"
    elif with_shortcut is False:
        choices = ["conv" if k == "residual" else k for k in choices]
    opts = pick.child("opts")
    for kind in choices:
        flip = opts.integers(2, 3)
        width = 2 + int(opts.integers(6, 1)[0])
        if kind == "conv":
            x = b.conv(x, width, k=int(1 + 2 * flip[0]))
            if flip[1]:
                x = b.bn(x)
            x = b.relu6(x)
        elif kind == "dwsep":
            x = b.relu6(b.dwconv(x, k=3))
            x = b.pwconv(x, width)
            if flip[2]:
                x = b.bn(x)
        elif kind == "pool":
            if b.shapes[x][0] >= 2:
                x = b.pool(x, "MaxPool" if flip[0] else "AvgPool")
            else:
                x = b.relu6(x)
        else:
            if x == "input":
                x = b.relu6(b.conv(x, width))
            y = b.conv(x, b.shapes[x][2], k=3)
            if flip[1]:
                y = b.bn(y)
            x = b.add(x, b.relu6(y))
    x = b.dense(b.global_pool(x), 2 + int(opts.integers(5, 1)[0]))
    if opts.integers(2, 1)[0]:
        x = b.softmax(x)
    return b.build(x)


def as_dtype(g: ModelGraph, dtype) -> ModelGraph:
    """Copy of ``g`` with every floating-point weight cast to ``dtype``."""
    nodes = []
    for node in g.nodes:
        n = node.copy()
        n.weights = {k: v.astype(dtype) if v.dtype.kind == "f" else v for k, v in n.weights.items()}
        nodes.append(n)
    return ModelGraph(nodes, g.input_shape, g.output, g.input_name)

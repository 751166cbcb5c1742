"""Model graph IR, shape inference, and the straight-line reference interpreter.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` nodes.  Every
node consumes named tensors and produces one tensor named after itself
(placeholders may produce several, listed in ``outputs``).  The graph input
is the tensor ``input_name``; nodes must appear in topological order.

The op table at the bottom is shared by the reference interpreter and the
secure executor, which is why every secure-side op accepts ``out=``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import GraphError, ShapeError, UnknownLayer
from .transform import ConvTransformSecret, restore_conv_output, shuffle_channels

LINEAR_KINDS = ("Conv", "DWConv", "PWConv", "Dense")
NONLINEAR_KINDS = ("BatchNorm", "ReLU6", "AvgPool", "MaxPool", "Softmax", "Add")
BASE_KINDS = LINEAR_KINDS + NONLINEAR_KINDS
SHADOW_KINDS = ("LinearTransform", "ShuffleChannel", "PushMask", "PopMask")
PLACEHOLDER_KINDS = ("TeeShadow", "TeeMerge")
ALL_KINDS = BASE_KINDS + SHADOW_KINDS + PLACEHOLDER_KINDS

_REQUIRED = {
    "Conv": ({"kernel"}, {"stride", "padding"}),
    "PWConv": ({"kernel"}, {"stride", "padding"}),
    "DWConv": ({"kernel"}, {"stride", "padding"}),
    "Dense": ({"kernel"}, set()),
    "BatchNorm": ({"gamma", "beta", "mean", "variance"}, {"epsilon"}),
    "AvgPool": (set(), {"window", "stride"}),
    "MaxPool": (set(), {"window", "stride"}),
    "LinearTransform": ({"lambdas", "mask_filter", "index", "perm"}, set()),
    "ShuffleChannel": ({"perm"}, {"mode"}),
    "PushMask": (set(), {"mask"}),
    "PopMask": (set(), {"mask", "op"}),
}


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list
    attrs: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    outputs: list | None = None
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise UnknownLayer(f"unknown layer kind {self.kind!r} for node {self.name!r}")
        self.inputs = list(self.inputs)
        if self.outputs is None:
            self.outputs = [self.name]
        weights_needed, attrs_needed = _REQUIRED.get(self.kind, (set(), set()))
        missing = (weights_needed - set(self.weights)) | (attrs_needed - set(self.attrs))
        if missing:
            raise GraphError(f"node {self.name!r} ({self.kind}) is missing {sorted(missing)}")
        want = 2 if self.kind == "Add" else 1
        if self.kind not in PLACEHOLDER_KINDS and len(self.inputs) != want:
            raise GraphError(f"node {self.name!r} ({self.kind}) takes {want} input(s), got {len(self.inputs)}")

    @property
    def is_linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    def conv_filter(self) -> T.ConvFilter:
        return T.ConvFilter(self.weights["kernel"], self.attrs.get("stride", 1), self.attrs.get("padding", "valid"))

    def dw_filter(self) -> T.DWFilter:
        return T.DWFilter(self.weights["kernel"], self.attrs.get("stride", 1), self.attrs.get("padding", "valid"))

    def bn_params(self) -> T.BatchNormParams:
        w = self.weights
        return T.BatchNormParams(w["gamma"], w["beta"], w["mean"], w["variance"], self.attrs["epsilon"])

    def secret(self) -> ConvTransformSecret:
        if "secret" not in self.cache:
            w = self.weights
            self.cache["secret"] = ConvTransformSecret(w["lambdas"], w["mask_filter"], w["index"], w["perm"])
        return self.cache["secret"]

    def copy(self, **changes) -> "LayerSpec":
        fields = dict(
            name=self.name,
            kind=self.kind,
            inputs=list(self.inputs),
            attrs=dict(self.attrs),
            weights=dict(self.weights),
            outputs=list(self.outputs),
        )
        fields.update(changes)
        return LayerSpec(**fields)


@dataclass
class ModelGraph:
    nodes: list
    input_shape: tuple
    output: str
    input_name: str = "input"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self) -> None:
        seen = {self.input_name}
        names = set()
        for node in self.nodes:
            if node.name in names:
                raise GraphError(f"duplicate node name {node.name!r}")
            names.add(node.name)
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"node {node.name!r} reads {src!r} before it is produced (cycle or dangling edge)")
            for out in node.outputs:
                if out in seen:
                    raise GraphError(f"tensor {out!r} produced twice")
                seen.add(out)
        if self.output not in seen:
            raise GraphError(f"graph output {self.output!r} is never produced")

    def node(self, name: str) -> LayerSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def producers(self) -> dict:
        return {out: n for n in self.nodes for out in n.outputs}

    def consumers(self) -> dict:
        users: dict = {}
        for n in self.nodes:
            for src in n.inputs:
                users.setdefault(src, []).append(n)
        return users

    def kinds(self) -> list:
        return [n.kind for n in self.nodes]


def node_output_shape(node: LayerSpec, in_shapes: list) -> tuple:
    k = node.kind
    s = tuple(in_shapes[0]) if in_shapes else ()
    if k in ("Conv", "PWConv"):
        kern = node.weights["kernel"]
        if s[2] != kern.shape[2]:
            raise ShapeError(f"{node.name}: input has {s[2]} channels, kernel expects {kern.shape[2]}", "cin")
        if k == "PWConv" and kern.shape[:2] != (1, 1):
            raise ShapeError(f"{node.name}: PWConv kernel must be 1x1", "kernel")
        return T.conv_output_shape(s, kern.shape[0], kern.shape[1], kern.shape[3], node.attrs["stride"], node.attrs["padding"])
    if k == "DWConv":
        kern = node.weights["kernel"]
        if s[2] != kern.shape[2]:
            raise ShapeError(f"{node.name}: input has {s[2]} channels, depthwise kernel has {kern.shape[2]}", "c")
        return T.conv_output_shape(s, kern.shape[0], kern.shape[1], s[2], node.attrs["stride"], node.attrs["padding"])
    if k == "Dense":
        n, m = node.weights["kernel"].shape
        if s[:2] != (1, 1) or s[2] != n:
            raise ShapeError(f"{node.name}: dense layer expects a 1x1x{n} input, got {s}", "n")
        return (1, 1, m)
    if k in ("AvgPool", "MaxPool"):
        kh, kw = node.attrs["window"]
        st = node.attrs["stride"] or kh
        return (T.output_size(s[0], kh, st, "valid"), T.output_size(s[1], kw, st, "valid"), s[2])
    if k == "BatchNorm":
        if s[2] != len(node.weights["gamma"]):
            raise ShapeError(f"{node.name}: batchnorm channel count mismatch", "c")
        return s
    if k == "Add":
        if tuple(in_shapes[0]) != tuple(in_shapes[1]):
            raise ShapeError(f"{node.name}: cannot add {in_shapes[0]} and {in_shapes[1]}", "shape")
        return s
    if k == "LinearTransform":
        sec = node.secret()
        if s[2] != sec.m:
            raise ShapeError(f"{node.name}: expected {sec.m} channels, got {s[2]}", "c")
        return s[:2] + (sec.n,)
    if k == "ShuffleChannel":
        if s[2] != len(node.weights["perm"]):
            raise ShapeError(f"{node.name}: expected {len(node.weights['perm'])} channels, got {s[2]}", "c")
        return s
    if k in ("ReLU6", "Softmax", "PushMask", "PopMask"):
        return s
    raise UnknownLayer(f"cannot infer shape for {k}")


def infer_shapes(g: ModelGraph) -> dict:
    """Shape of every tensor in the graph, keyed by tensor name."""
    shapes = {g.input_name: g.input_shape}
    for node in g.nodes:
        if node.kind in PLACEHOLDER_KINDS:
            for out in node.outputs:
                shapes[out] = tuple(node.attrs["shapes"][out])
            continue
        shapes[node.name] = node_output_shape(node, [shapes[i] for i in node.inputs])
    return shapes


def mask_unmask_term(node: LayerSpec, mask: np.ndarray) -> np.ndarray:
    """What the outsourced layer behind ``node`` (a PopMask) does to a mask."""
    op = node.attrs["op"]
    if op == "identity":
        return mask.copy()
    if op in ("conv", "pwconv"):
        return T.conv2d(mask, node.conv_filter())
    if op == "dwconv":
        return T.dwconv2d(mask, node.dw_filter())
    raise UnknownLayer(f"PopMask {node.name!r} has unknown op {op!r}")


# Secure-side kernels: fn(node, inputs, out, masks) -> out.  ``in_place`` marks
# kernels that may write over their first input.
def _op_bn(node, xs, out, masks):
    return T.batchnorm(xs[0], node.bn_params(), out=out)


def _op_relu6(node, xs, out, masks):
    return T.relu6(xs[0], out=out)


def _op_softmax(node, xs, out, masks):
    return T.softmax(xs[0], out=out)


def _op_add(node, xs, out, masks):
    return T.add(xs[0], xs[1], out=out)


def _op_avgpool(node, xs, out, masks):
    return T.avg_pool(xs[0], node.attrs["window"], node.attrs["stride"], out=out)


def _op_maxpool(node, xs, out, masks):
    return T.max_pool(xs[0], node.attrs["window"], node.attrs["stride"], out=out)


def _op_linear_transform(node, xs, out, masks):
    return restore_conv_output(xs[0], node.secret(), out=out)


def _op_shuffle(node, xs, out, masks):
    inverse = node.attrs["mode"] == "gather"
    return shuffle_channels(xs[0], node.weights["perm"], node.weights.get("lambdas"), inverse=inverse, out=out)


def _op_push(node, xs, out, masks):
    m = masks.mask(node.attrs["mask"]) if masks is not None else None
    if m is None:
        return _copy(xs[0], out)
    return np.add(xs[0], m.astype(xs[0].dtype, copy=False), out=out)


def _op_pop(node, xs, out, masks):
    u = masks.unmask(node.attrs["mask"]) if masks is not None else None
    if u is None:
        return _copy(xs[0], out)
    return np.subtract(xs[0], u.astype(xs[0].dtype, copy=False), out=out)


def _copy(x, out):
    if out is None:
        return x.copy()
    if out is not x:
        out[...] = x
    return out


SECURE_OPS = {
    "BatchNorm": (_op_bn, True),
    "ReLU6": (_op_relu6, True),
    "Softmax": (_op_softmax, True),
    "Add": (_op_add, True),
    "AvgPool": (_op_avgpool, False),
    "MaxPool": (_op_maxpool, False),
    "LinearTransform": (_op_linear_transform, False),
    "ShuffleChannel": (_op_shuffle, False),
    "PushMask": (_op_push, True),
    "PopMask": (_op_pop, True),
}


def run_linear(node: LayerSpec, x: np.ndarray) -> np.ndarray:
    if node.kind in ("Conv", "PWConv"):
        f = node.conv_filter()
        return T.pointwise_conv(x, f) if node.kind == "PWConv" else T.conv2d(x, f)
    if node.kind == "DWConv":
        return T.dwconv2d(x, node.dw_filter())
    if node.kind == "Dense":
        return T.dense(x, node.weights["kernel"])
    raise UnknownLayer(f"{node.kind} is not a linear layer")


def run_node(node: LayerSpec, xs: list, masks=None) -> np.ndarray:
    if node.is_linear:
        return run_linear(node, xs[0])
    if node.kind in SECURE_OPS:
        return SECURE_OPS[node.kind][0](node, xs, None, masks)
    raise UnknownLayer(f"the interpreter cannot execute {node.kind} node {node.name!r}")


def run_graph(g: ModelGraph, x: np.ndarray, masks=None, keep: bool = False):
    """Execute ``g`` on ``x``.  With ``keep`` returns ``(output, {tensor: value})``.

    ``masks`` supplies PushMask/PopMask tensors (anything with ``mask(id)`` and
    ``unmask(id)`` methods); without it those layers are identities.  Step-2
    placeholders are executed by running their ``body`` inline.
    """
    if tuple(x.shape) != g.input_shape:
        raise ShapeError(f"model expects input {g.input_shape}, got {tuple(x.shape)}", "input")
    env = {g.input_name: x}
    for node in g.nodes:
        if node.kind in PLACEHOLDER_KINDS:
            for inner in node.attrs["body"]:
                env[inner.name] = run_node(inner, [env[i] for i in inner.inputs], masks)
            continue
        env[node.name] = run_node(node, [env[i] for i in node.inputs], masks)
    if keep:
        return env[g.output], env
    return env[g.output]

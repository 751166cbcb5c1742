"""Two-step model conversion and the untrusted/secure split.

Step 1 rewrites every linear layer ``L``:

* Conv / PWConv (Dense is canonicalized to PWConv first) becomes
  ``PushMask -> obfuscated conv -> LinearTransform -> PopMask``
* DWConv becomes
  ``PushMask -> ShuffleChannel -> obfuscated dwconv -> ShuffleChannel -> PopMask``

The last node of each replacement keeps the name ``L`` so downstream edges are
untouched.  A layer reading the raw model input gets neither PushMask nor
PopMask: its input is public and nothing needs unmasking.

Secure activations that must reach a later secure region directly (identity
shortcuts) are routed through the untrusted side as masked carries, a
PushMask in the producing region and an identity PopMask in the consuming one.

Step 2 collapses each connected run of secure nodes into a TeeShadow
placeholder, or a TeeMerge when it has several inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from .errors import GraphError, UnknownLayer
from .graph import (
    BASE_KINDS,
    LINEAR_KINDS,
    PLACEHOLDER_KINDS,
    LayerSpec,
    ModelGraph,
    infer_shapes,
)
from .masking import MaskSpec
from .rng import as_stream
from .transform import (
    ObfuscationParams,
    gen_conv_secret,
    gen_dw_secret,
    transform_conv,
    transform_dwconv,
)

# Weight and attribute ids that only the secure world may hold.
SECRET_FIELDS = frozenset({"lambdas", "mask_filter", "index", "perm", "original_kernel", "mask", "body"})


def canonicalize(g: ModelGraph) -> ModelGraph:
    """Rewrite Dense layers as 1x1 convolutions over a 1x1xn tensor."""
    nodes = []
    for node in g.nodes:
        if node.kind == "Dense":
            n, m = node.weights["kernel"].shape
            node = node.copy(
                kind="PWConv",
                attrs={"stride": 1, "padding": "valid", "dense": True},
                weights={"kernel": node.weights["kernel"].reshape(1, 1, n, m)},
            )
        nodes.append(node)
    out = ModelGraph(nodes, g.input_shape, g.output, g.input_name)
    infer_shapes(out)
    return out


def convert_step1(g: ModelGraph, params: ObfuscationParams, rng=None):
    """Replace linear layers by their obfuscated forms.  Returns ``(graph, secrets)``."""
    for node in g.nodes:
        if node.kind not in BASE_KINDS:
            raise UnknownLayer(f"step 1 expects an unconverted graph; {node.name!r} is {node.kind}")
    g = canonicalize(g)
    rng = as_stream(params.seed if rng is None else rng)
    secrets: dict = {}
    nodes: list = []
    for node in g.nodes:
        if node.kind not in LINEAR_KINDS:
            nodes.append(node.copy())
            continue
        name, src = node.name, node.inputs[0]
        masked = src != g.input_name
        geometry = {"stride": node.attrs["stride"], "padding": node.attrs["padding"]}
        stream = rng.child("layer", name)
        kern = node.weights["kernel"]
        cur = src
        if masked:
            nodes.append(LayerSpec(f"{name}/push", "PushMask", [cur], {"mask": name, "layer": name}))
            cur = f"{name}/push"
        if node.kind == "DWConv":
            s = gen_dw_secret(kern.shape[2], params, stream, dtype=kern.dtype)
            secrets[name] = s
            nodes.append(
                LayerSpec(
                    f"{name}/shuffle_in", "ShuffleChannel", [cur], {"mode": "scatter", "layer": name},
                    {"perm": s.perm, "lambdas": s.lambdas},
                )
            )
            what = transform_dwconv(node.dw_filter(), s)
            nodes.append(LayerSpec(f"{name}/obf", "DWConv", [f"{name}/shuffle_in"], dict(geometry, layer=name), {"kernel": what.kernels}))
            tail = name if not masked else f"{name}/shuffle_out"
            nodes.append(LayerSpec(tail, "ShuffleChannel", [f"{name}/obf"], {"mode": "gather", "layer": name}, {"perm": s.perm}))
            op = "dwconv"
        else:
            s = gen_conv_secret(kern.shape[3], kern.shape[:3], params, stream, kern.dtype, _mask_scale(kern, params))
            secrets[name] = s
            what = transform_conv(node.conv_filter(), s)
            attrs = dict(geometry, layer=name)
            if node.attrs.get("dense"):
                attrs["dense"] = True
            nodes.append(LayerSpec(f"{name}/obf", node.kind, [cur], attrs, {"kernel": what.kernels}))
            tail = name if not masked else f"{name}/restore"
            nodes.append(
                LayerSpec(
                    tail, "LinearTransform", [f"{name}/obf"], {"layer": name},
                    {"lambdas": s.lambdas, "mask_filter": s.mask_filter, "index": s.index, "perm": s.perm},
                )
            )
            op = "pwconv" if node.kind == "PWConv" else "conv"
        if masked:
            nodes.append(
                LayerSpec(name, "PopMask", [tail], dict(geometry, mask=name, op=op, layer=name), {"original_kernel": kern})
            )
    g1 = ModelGraph(_insert_carries(nodes, g.input_name), g.input_shape, g.output, g.input_name)
    infer_shapes(g1)
    return g1, secrets


def _mask_scale(kern: np.ndarray, params: ObfuscationParams) -> float:
    peak = float(np.max(np.abs(kern))) if kern.size else 0.0
    if peak == 0.0:
        return 1.0
    if params.dyadic:
        return float(2.0 ** np.ceil(np.log2(peak)))  # stays on the dyadic grid
    return peak


def _is_boundary(node: LayerSpec) -> bool:
    """Outputs of these nodes are observed by the untrusted side."""
    return node.kind in LINEAR_KINDS or (node.kind == "PushMask" and node.attrs.get("carry", False))


def _stages(nodes: list, input_name: str) -> dict:
    stage = {input_name: 0}
    producer = {}
    for node in nodes:
        s = 0
        for src in node.inputs:
            p = producer.get(src)
            s = max(s, stage[src] + (1 if p is not None and _is_boundary(p) else 0))
        stage[node.name] = s
        producer[node.name] = node
    return stage


def _insert_carries(nodes: list, input_name: str) -> list:
    stage = _stages(nodes, input_name)
    producer = {n.name: n for n in nodes}
    cuts = []
    for node in nodes:
        if node.kind in LINEAR_KINDS:
            continue
        for k, src in enumerate(node.inputs):
            p = producer.get(src)
            if p is not None and p.kind not in LINEAR_KINDS and stage[src] != stage[node.name]:
                cuts.append((src, node.name, k))
    if not cuts:
        return nodes
    after: dict = {}
    before: dict = {}
    rewired: dict = {}
    for j, (src, dst, k) in enumerate(cuts):
        mask_id = f"carry:{src}->{dst}:{k}"
        push = LayerSpec(f"{src}/carry{j}", "PushMask", [src], {"mask": mask_id, "carry": True})
        pop = LayerSpec(f"{dst}/uncarry{j}", "PopMask", [push.name], {"mask": mask_id, "op": "identity", "carry": True})
        after.setdefault(src, []).append(push)
        before.setdefault(dst, []).append(pop)
        rewired[(dst, k)] = pop.name
    out = []
    for node in nodes:
        out.extend(before.get(node.name, []))
        if any((node.name, k) in rewired for k in range(len(node.inputs))):
            node = node.copy(inputs=[rewired.get((node.name, k), s) for k, s in enumerate(node.inputs)])
        out.append(node)
        out.extend(after.get(node.name, []))
    return out


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def convert_step2(g1: ModelGraph) -> ModelGraph:
    """Collapse secure runs into TeeShadow / TeeMerge placeholders (bodies kept in ``attrs['body']``)."""
    for node in g1.nodes:
        if node.kind in PLACEHOLDER_KINDS:
            raise GraphError("graph already contains placeholders")
    shapes = infer_shapes(g1)
    producer = g1.producers()
    order = {n.name: i for i, n in enumerate(g1.nodes)}
    secure = [n for n in g1.nodes if n.kind not in LINEAR_KINDS]
    uf = _UnionFind()
    for node in secure:
        uf.find(node.name)
        for src in node.inputs:
            p = producer.get(src)
            if p is not None and p.kind not in LINEAR_KINDS and not _is_boundary(p):
                uf.union(src, node.name)
    groups: dict = {}
    for node in secure:
        groups.setdefault(uf.find(node.name), []).append(node)
    regions = sorted(groups.values(), key=lambda body: order[body[0].name])
    users = g1.consumers()

    placeholders = []
    for k, body in enumerate(regions):
        names = {n.name for n in body}
        inputs: list = []
        for n in body:
            for src in n.inputs:
                if src not in names and src not in inputs:
                    inputs.append(src)
        outputs = [
            n.name
            for n in body
            if n.name == g1.output or any(u.name not in names for u in users.get(n.name, []))
        ]
        kind = "TeeMerge" if len(inputs) > 1 else "TeeShadow"
        attrs = {"region": k, "shapes": {o: list(shapes[o]) for o in outputs}, "body": [n.copy() for n in body]}
        placeholders.append(LayerSpec(f"tee{k}", kind, inputs, attrs, outputs=outputs))

    units = [n.copy() for n in g1.nodes if n.kind in LINEAR_KINDS] + placeholders
    first_index = {}
    for u in units:
        body = u.attrs.get("body")
        first_index[u.name] = order[body[0].name] if body else order[u.name]
    ordered, avail = [], {g1.input_name}
    pending = sorted(units, key=lambda u: first_index[u.name])
    while pending:
        for i, u in enumerate(pending):
            if all(src in avail for src in u.inputs):
                ordered.append(u)
                avail.update(u.outputs)
                del pending[i]
                break
        else:
            stuck = [u.name for u in pending]
            raise GraphError(f"secure regions form a cycle through the untrusted side: {stuck}")
    return ModelGraph(ordered, g1.input_shape, g1.output, g1.input_name)


@dataclass
class Region:
    region_id: int
    kind: str
    inputs: list
    outputs: list
    nodes: list


@dataclass
class PartB:
    """Everything the secure world holds: region bodies, secrets, original weights."""

    regions: dict
    shapes: dict  # tensor name -> shape for every tensor a region reads or writes
    input_shape: tuple
    output: str
    meta: dict = field(default_factory=dict)

    def all_nodes(self) -> list:
        return [n for r in self.regions.values() for n in r.nodes]

    def mask_specs(self) -> list:
        pops = {n.attrs["mask"]: n for n in self.all_nodes() if n.kind == "PopMask"}
        specs = []
        for n in self.all_nodes():
            if n.kind == "PushMask":
                mask_id = n.attrs["mask"]
                if mask_id not in pops:
                    raise GraphError(f"mask {mask_id!r} is pushed but never popped")
                specs.append(MaskSpec(mask_id, tuple(self.shapes[n.inputs[0]]), pops[mask_id], float(n.attrs.get("scale", 1.0))))
        return specs

    def static_tensors(self) -> list:
        return [a for n in self.all_nodes() for a in n.weights.values()]


def split(g2: ModelGraph):
    """Split a step-2 graph into the untrusted Part A and the secure Part B."""
    nodes_a, regions, shapes = [], {}, {}
    for node in g2.nodes:
        if node.kind in PLACEHOLDER_KINDS:
            body = node.attrs["body"]
            rid = node.attrs["region"]
            regions[rid] = Region(rid, node.kind, list(node.inputs), list(node.outputs), [b.copy() for b in body])
            stub = {"region": rid, "shapes": node.attrs["shapes"]}
            nodes_a.append(LayerSpec(node.name, node.kind, node.inputs, stub, outputs=list(node.outputs)))
        elif node.kind in LINEAR_KINDS:
            attrs = {k: v for k, v in node.attrs.items() if k in ("stride", "padding", "layer", "dense")}
            nodes_a.append(LayerSpec(node.name, node.kind, node.inputs, attrs, {"kernel": node.weights["kernel"]}))
        else:
            raise GraphError(f"split expects a step-2 graph; found bare {node.kind} node {node.name!r}")
    part_a = ModelGraph(nodes_a, g2.input_shape, g2.output, g2.input_name)
    all_shapes = _region_shapes(g2)
    for r in regions.values():
        for n in r.nodes:
            for t in list(n.inputs) + [n.name]:
                shapes[t] = tuple(all_shapes[t])
    floats = [a for n in g2.nodes if n.kind in LINEAR_KINDS for a in n.weights.values()]
    dtype = np.dtype(floats[0].dtype).name if floats else "float32"
    part_b = PartB(regions, shapes, g2.input_shape, g2.output, {"dtype": dtype})
    return part_a, part_b


def _region_shapes(g2: ModelGraph) -> dict:
    flat = []
    for node in g2.nodes:
        flat.extend(node.attrs["body"] if node.kind in PLACEHOLDER_KINDS else [node])
    return infer_shapes(ModelGraph(flat, g2.input_shape, g2.output, g2.input_name))


def convert(g: ModelGraph, params: ObfuscationParams, rng=None):
    """Full pipeline: ``(part_a, part_b, secrets)``."""
    g1, secrets = convert_step1(g, params, rng)
    part_a, part_b = split(convert_step2(g1))
    part_b.meta.update(
        {"ratio": params.ratio, "scalar_bound": params.scalar_bound, "scalar_floor": params.scalar_floor, "dyadic": params.dyadic}
    )
    return part_a, part_b, secrets


def find_secret_fields(obj, path="") -> list:
    """Paths of any secret-bearing field ids inside a Part A (or any structure)."""
    hits = []
    if isinstance(obj, ModelGraph):
        for n in obj.nodes:
            if n.kind not in LINEAR_KINDS and n.kind not in PLACEHOLDER_KINDS:
                hits.append(f"{path}{n.name}:kind={n.kind}")
            hits += find_secret_fields(n, f"{path}{n.name}.")
    elif isinstance(obj, LayerSpec):
        hits += find_secret_fields(obj.weights, f"{path}weights.")
        hits += find_secret_fields(obj.attrs, f"{path}attrs.")
    elif isinstance(obj, dict):
        for k, v in obj.items():
            if k in SECRET_FIELDS:
                hits.append(f"{path}{k}")
            hits += find_secret_fields(v, f"{path}{k}.")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            hits += find_secret_fields(v, f"{path}{i}.")
    elif is_dataclass(obj) and not isinstance(obj, type):
        for f in fields(obj):
            hits += find_secret_fields(getattr(obj, f.name), f"{path}{f.name}.")
    return hits


def part_a_linear_params(part_a: ModelGraph, include_depthwise: bool = False) -> int:
    total = 0
    for n in part_a.nodes:
        if n.kind in ("Conv", "PWConv") or (include_depthwise and n.kind == "DWConv"):
            total += int(np.prod(n.weights["kernel"].shape))
    return total

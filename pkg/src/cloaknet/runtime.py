"""Simulated two-world runtime.

The secure executor is only reachable through :meth:`SecureChannel.call`
with one of five commands (LoadPartB, ReloadMasks, RunShadow, RunMerge,
Teardown).  Payload arrays are copied on the way in and out, so the normal
world never holds a reference into secure memory.

Secure memory comes from a :class:`SecureHeap` that records every
allocation and is sealed after LoadPartB; any later allocation is a
protocol violation.  Activations live in exactly two rotating buffers sized
to the largest secure-side tensor.  Each region has a static buffer plan
computed at load time.
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import snm
from . import tensor as T
from .convert import PartB
from .errors import BudgetExceeded, GraphError, ProtocolError, ShapeError
from .graph import LINEAR_KINDS, PLACEHOLDER_KINDS, ModelGraph, run_linear
from .masking import MaskState, generate_round_masks
from .rng import Stream, as_stream

DEFAULT_BUDGET = 64 * 2**20
IN_PLACE = {"BatchNorm", "ReLU6", "Softmax", "Add", "PushMask", "PopMask"}


class Command(enum.Enum):
    LOAD_PART_B = "LoadPartB"
    RELOAD_MASKS = "ReloadMasks"
    RUN_SHADOW = "RunShadow"
    RUN_MERGE = "RunMerge"
    TEARDOWN = "Teardown"


class SecureHeap:
    """Allocator shim for the secure world: every tensor it hands out is recorded."""

    def __init__(self, budget: int):
        self.budget = int(budget)
        self.records: list = []  # (tag, nbytes)
        self.sealed = False
        self.rejected = 0

    def _charge(self, nbytes: int, tag: str) -> None:
        if self.sealed:
            self.rejected += 1
            raise ProtocolError(f"secure allocation of {nbytes} bytes ({tag}) after session_init")
        self.records.append((tag, int(nbytes)))

    def alloc(self, shape, dtype, tag: str) -> np.ndarray:
        dt = np.dtype(dtype)
        self._charge(int(np.prod(shape, dtype=np.int64)) * dt.itemsize, tag)
        return np.zeros(shape, dtype=dt)

    def adopt(self, a: np.ndarray, tag: str) -> np.ndarray:
        """Account for a tensor that arrived inside a LoadPartB message."""
        self._charge(a.nbytes, tag)
        return a

    def seal(self) -> None:
        self.sealed = True

    def bytes(self, tag: str | None = None) -> int:
        return sum(n for t, n in self.records if tag is None or t == tag)

    def count(self, tag: str | None = None) -> int:
        return sum(1 for t, _ in self.records if tag is None or t == tag)


@dataclass
class _Step:
    node: object
    sources: list  # per input: ("msg", name) or ("buf", index)
    out_buf: int
    emit: bool


def plan_region(region, shapes: dict) -> list:
    """Greedy two-buffer schedule for one region body.

    Prefers writing in place over a dead input; raises when three tensors
    would have to be live at once.
    """
    names = {n.name for n in region.nodes}
    last_use: dict = {}
    for k, n in enumerate(region.nodes):
        for src in n.inputs:
            last_use[src] = k
    holder = [None, None]  # tensor currently held by each buffer
    where: dict = {}
    steps = []
    for k, n in enumerate(region.nodes):
        sources = [("buf", where[s]) if s in where else ("msg", s) for s in n.inputs]
        for src, (loc, _) in zip(n.inputs, sources):
            if loc == "msg" and src in names:
                raise GraphError(f"{n.name}: input {src!r} was released before use")
        dying = [where[s] for s in n.inputs if s in where and last_use[s] == k]
        if n.kind in IN_PLACE and dying:
            out = dying[0]
        else:
            busy = {where[s] for s in n.inputs if s in where}
            free = [b for b in (0, 1) if holder[b] is None and b not in busy]
            if not free:
                raise GraphError(
                    f"region {region.region_id}: {n.name} needs a third activation buffer "
                    f"(live: {holder[0]!r}, {holder[1]!r})"
                )
            out = free[0]
        for s in n.inputs:
            if s in where and last_use[s] == k:
                holder[where.pop(s)] = None
        holder[out] = n.name
        where[n.name] = out
        emit = n.name in region.outputs
        steps.append(_Step(n, sources, out, emit))
        if emit and n.name not in last_use:
            holder[where.pop(n.name)] = None
    return steps


# Secure kernels.  They write into ``out`` and allocate nothing; the shared
# scratch plane is an (h, w) view for per-pixel reductions.
def _k_bn(node, xs, out, ctx):
    w = node.weights
    np.subtract(xs[0], w["mean"], out=out)
    np.divide(out, w["variance"], out=out)  # holds sqrt(variance + eps) after load
    np.multiply(out, w["gamma"], out=out)
    np.add(out, w["beta"], out=out)


def _k_relu6(node, xs, out, ctx):
    np.clip(xs[0], 0, 6, out=out)


def _k_softmax(node, xs, out, ctx):
    plane = ctx.plane(xs[0].shape[:2], xs[0].dtype)
    np.max(xs[0], axis=-1, out=plane)
    np.subtract(xs[0], plane[..., None], out=out)
    np.exp(out, out=out)
    np.sum(out, axis=-1, out=plane)
    np.divide(out, plane[..., None], out=out)


def _k_add(node, xs, out, ctx):
    np.add(xs[0], xs[1], out=out)


def _k_pool(node, xs, out, ctx):
    fn = T.max_pool if node.kind == "MaxPool" else T.avg_pool
    fn(xs[0], node.attrs["window"], node.attrs["stride"], out=out)


def _k_restore(node, xs, out, ctx):
    # Same two products and one sum per element as pointwise_conv with the
    # restore filter, so results agree bitwise.
    w = node.weights
    src, recip, perm, index = xs[0], w["lambdas"], w["perm"], w["index"]
    n, m = len(recip), len(perm)
    if src.shape[-1] != m:
        raise ShapeError(f"{node.name}: expected {m} channels, got {src.shape[-1]}", "c")
    plane = ctx.plane(src.shape[:2], src.dtype) if m > n else None
    for i in range(n):
        o = out[..., i]
        np.multiply(src[..., perm[i]], recip[i], out=o)
        if plane is not None:
            np.multiply(src[..., perm[n + index[i]]], recip[i], out=plane)
            np.subtract(o, plane, out=o)


def _k_shuffle(node, xs, out, ctx):
    perm, lam = node.weights["perm"], node.weights.get("lambdas")
    x = xs[0]
    if x.shape[-1] != len(perm):
        raise ShapeError(f"{node.name}: expected {len(perm)} channels, got {x.shape[-1]}", "c")
    if node.attrs["mode"] == "gather":
        for i in range(len(perm)):
            np.copyto(out[..., i], x[..., perm[i]])
    elif lam is None:
        for i in range(len(perm)):
            np.copyto(out[..., perm[i]], x[..., i])
    else:
        for i in range(len(perm)):
            np.divide(x[..., i], lam[i], out=out[..., perm[i]])


def _k_push(node, xs, out, ctx):
    np.add(xs[0], ctx.masks.masks[node.attrs["mask"]], out=out)


def _k_pop(node, xs, out, ctx):
    np.subtract(xs[0], ctx.masks.unmasks[node.attrs["mask"]], out=out)


KERNELS = {
    "BatchNorm": _k_bn,
    "ReLU6": _k_relu6,
    "Softmax": _k_softmax,
    "Add": _k_add,
    "AvgPool": _k_pool,
    "MaxPool": _k_pool,
    "LinearTransform": _k_restore,
    "ShuffleChannel": _k_shuffle,
    "PushMask": _k_push,
    "PopMask": _k_pop,
}


def _prepare(node, heap: SecureHeap) -> None:
    """One-time in-place preprocessing of a node's tensors at load."""
    w = node.weights
    for k in list(w):
        if isinstance(w[k], np.ndarray):
            w[k] = heap.adopt(w[k], "model")
    if node.kind == "BatchNorm":
        var = w["variance"]
        np.add(var, var.dtype.type(node.attrs["epsilon"]), out=var)
        np.sqrt(var, out=var)
    elif node.kind == "LinearTransform":
        lam = w["lambdas"]
        np.divide(lam.dtype.type(1), lam, out=lam)


class SecureExecutor:
    """The trusted side.  Only :class:`SecureChannel` should talk to it."""

    def __init__(self, budget: int = DEFAULT_BUDGET, faults: dict | None = None, probe: dict | None = None):
        self._heap = SecureHeap(budget)
        self._faults = dict(faults or {})  # stale_unmask / zero_mask -> mask id, for negative tests
        self._probe = probe  # debug only: receives a copy of every secure tensor by node name
        self._part_b = None
        self._plans: dict = {}
        self._buffers: list = []
        self._scratch = None
        self._masks = None
        self._rng = None
        self._round = 0
        self._mask_scale = 1.0
        self._loaded = False
        self.footprint: dict = {}

    # context used by kernels
    @property
    def masks(self) -> MaskState:
        return self._masks

    def plane(self, hw, dtype) -> np.ndarray:
        n = int(hw[0]) * int(hw[1]) * np.dtype(dtype).itemsize
        return self._scratch[:n].view(dtype).reshape(hw)

    def handle(self, command: Command, payload: dict) -> dict:
        if command is Command.LOAD_PART_B:
            return self._load(payload)
        if not self._loaded:
            raise ProtocolError(f"{command.value} before LoadPartB")
        if command is Command.RELOAD_MASKS:
            return self._reload(payload)
        if command in (Command.RUN_SHADOW, Command.RUN_MERGE):
            return self._run(command, payload)
        if command is Command.TEARDOWN:
            self._teardown()
            return {}
        raise ProtocolError(f"unknown command {command!r}")

    def _load(self, payload: dict) -> dict:
        if self._loaded:
            raise ProtocolError("Part B is already loaded")
        part_b: PartB = snm.loads(payload["part_b"], expect="part_b")
        self._rng = as_stream(payload.get("seed", 0))
        self._mask_scale = float(payload.get("mask_scale", 1.0))
        heap = self._heap
        for node in part_b.all_nodes():
            _prepare(node, heap)
        specs = part_b.mask_specs()
        dt = np.dtype(part_b.meta.get("dtype", "float32"))
        mask_bytes = sum(dt.itemsize * (int(np.prod(sp.shape)) + int(np.prod(sp.unmask_shape))) for sp in specs)
        act = activation_bytes(part_b)
        plane = scratch_bytes(part_b)
        need = heap.bytes() + mask_bytes + plane + 2 * act
        if need > heap.budget:
            raise BudgetExceeded(need, heap.budget, "Part B static footprint")
        self._plans = {rid: plan_region(r, part_b.shapes) for rid, r in part_b.regions.items()}
        self._masks = MaskState()
        for spec in specs:
            self._masks.masks[spec.mask_id] = heap.alloc(spec.shape, dt, "mask")
            self._masks.unmasks[spec.mask_id] = heap.alloc(spec.unmask_shape, dt, "mask")
        self._mask_specs = specs
        self._buffers = [heap.alloc((act,), np.uint8, "activation") for _ in range(2)]
        self._scratch = heap.alloc((plane,), np.uint8, "scratch")
        heap.seal()
        self._part_b = part_b
        self._loaded = True
        self.footprint = {
            "model_bytes": heap.bytes("model"),
            "mask_bytes": heap.bytes("mask"),
            "scratch_bytes": heap.bytes("scratch"),
            "activation_bytes": heap.bytes("activation"),
            "max_activation_bytes": act,
            "total": heap.bytes(),
            "budget": heap.budget,
        }
        return {"footprint": dict(self.footprint)}

    def _reload(self, payload: dict) -> dict:
        round_id = int(payload["round"])
        if round_id <= self._round:
            raise ProtocolError(f"round {round_id} does not advance past {self._round}")
        rng = payload.get("rng") or self._rng
        stale = self._faults.get("stale_unmask")
        keep = self._masks.unmasks[stale].copy() if stale in self._masks.unmasks and self._round else None
        generate_round_masks(self._mask_specs, rng, round_id, self._mask_scale, into=self._masks, dtype=self._dtype)
        if keep is not None:
            self._masks.unmasks[stale][...] = keep
        zero = self._faults.get("zero_mask")
        if zero in self._masks.masks:
            self._masks.masks[zero][...] = 0
            self._masks.unmasks[zero][...] = 0
        self._round = round_id
        return {"round": round_id}

    def _run(self, command: Command, payload: dict) -> dict:
        rid = payload["region"]
        if rid not in self._plans:
            raise ProtocolError(f"no secure region {rid!r}")
        region = self._part_b.regions[rid]
        want = "TeeMerge" if command is Command.RUN_MERGE else "TeeShadow"
        if region.kind != want:
            raise ProtocolError(f"region {rid} is a {region.kind}; {command.value} does not apply")
        if self._mask_specs and self._round == 0:
            raise ProtocolError("ReloadMasks must run before the first placeholder")
        inputs = payload["inputs"]
        missing = [n for n in region.inputs if n not in inputs]
        if missing:
            raise ProtocolError(f"region {rid} is missing inputs {missing}")
        for name in region.inputs:
            if tuple(inputs[name].shape) != tuple(self._part_b.shapes[name]):
                raise ShapeError(f"input {name!r} has shape {inputs[name].shape}, expected {self._part_b.shapes[name]}", name)
        outputs = {}
        for step in self._plans[rid]:
            xs = [inputs[s] if loc == "msg" else self._view(ref, s) for (loc, ref), s in zip(step.sources, step.node.inputs)]
            out = self._view(step.out_buf, step.node.name)
            KERNELS[step.node.kind](step.node, xs, out, self)
            if step.emit:
                outputs[step.node.name] = out.copy()
            if self._probe is not None:
                self._probe[step.node.name] = out.copy()
        return {"outputs": outputs}

    def _view(self, buf: int, name: str) -> np.ndarray:
        shape = self._part_b.shapes[name]
        dt = self._dtype
        n = int(np.prod(shape)) * dt.itemsize
        return self._buffers[buf][:n].view(dt).reshape(shape)

    @property
    def _dtype(self) -> np.dtype:
        return np.dtype(self._part_b.meta.get("dtype", "float32"))

    def _teardown(self) -> None:
        for a in self._buffers:
            a[...] = 0
        if self._masks is not None:
            for d in (self._masks.masks, self._masks.unmasks):
                for a in d.values():
                    a[...] = 0
        self._part_b = None
        self._plans = {}
        self._loaded = False

    def heap_report(self) -> dict:
        h = self._heap
        return {
            "allocations": h.count(),
            "rejected_after_seal": h.rejected,
            "activation_bytes": h.bytes("activation"),
            "sealed": h.sealed,
        }


def activation_bytes(part_b: PartB) -> int:
    """Bytes of the largest tensor produced inside the secure world."""
    item = np.dtype(part_b.meta.get("dtype", "float32")).itemsize
    sizes = [int(np.prod(part_b.shapes[n.name])) * item for n in part_b.all_nodes()]
    return max(sizes, default=0)


def scratch_bytes(part_b: PartB) -> int:
    item = np.dtype(part_b.meta.get("dtype", "float32")).itemsize
    sizes = [0]
    for n in part_b.all_nodes():
        if n.kind in ("LinearTransform", "Softmax"):
            h, w = part_b.shapes[n.inputs[0]][:2]
            sizes.append(h * w * item)
    return max(sizes)


class SecureChannel:
    """The only path from the normal world into the secure executor."""

    def __init__(self, executor: SecureExecutor, log: list | None = None):
        self._executor = executor
        self.log = log if log is not None else []

    def call(self, command: Command, **payload) -> dict:
        payload = _copy_payload(payload)
        self.log.append({"command": command.value, **{k: v for k, v in payload.items() if k in ("region", "round")}})
        return _copy_payload(self._executor.handle(command, payload))


def _copy_payload(obj):
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, dict):
        return {k: _copy_payload(v) for k, v in obj.items()}
    return obj


@dataclass
class AdversaryView:
    """Everything the normal world sees during one inference."""

    model_input: np.ndarray | None = None
    model_output: np.ndarray | None = None
    weights: dict = field(default_factory=dict)  # outsourced node -> published kernel
    layer_inputs: dict = field(default_factory=dict)  # outsourced node -> what it was fed
    layer_outputs: dict = field(default_factory=dict)
    placeholder_io: list = field(default_factory=list)  # (placeholder, {inputs}, {outputs})
    trace: list = field(default_factory=list)

    def tensors(self):
        """(label, array) pairs for every tensor in the view."""
        if self.model_input is not None:
            yield "input", self.model_input
        if self.model_output is not None:
            yield "output", self.model_output
        for k, v in self.weights.items():
            yield f"weight:{k}", v
        for k, v in self.layer_inputs.items():
            yield f"layer_input:{k}", v
        for k, v in self.layer_outputs.items():
            yield f"layer_output:{k}", v
        for name, ins, outs in self.placeholder_io:
            for k, v in ins.items():
                yield f"tee_in:{name}:{k}", v
            for k, v in outs.items():
                yield f"tee_out:{name}:{k}", v

    def records(self) -> list:
        out = [dict(r, kind="event") for r in self.trace]
        for label, a in self.tensors():
            out.append(
                {
                    "kind": "tensor",
                    "label": label,
                    "dtype": a.dtype.str,
                    "shape": list(a.shape),
                    "data": base64.b64encode(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()).decode(),
                }
            )
        return out

    def dump_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records():
                fh.write(json.dumps(r, sort_keys=True) + "\n")


class NormalWorld:
    """Runs Part A; its only secure-side handle is the channel."""

    def __init__(self, part_a: ModelGraph, channel: SecureChannel):
        self.part_a = part_a
        self.channel = channel

    def run(self, x: np.ndarray) -> tuple:
        g = self.part_a
        if tuple(x.shape) != g.input_shape:
            raise ShapeError(f"model expects input {g.input_shape}, got {tuple(x.shape)}", "input")
        view = AdversaryView(model_input=x.copy())
        env = {g.input_name: x}
        seq = 0
        for node in g.nodes:
            seq += 1
            if node.kind in LINEAR_KINDS:
                xin = env[node.inputs[0]]
                view.weights[node.name] = node.weights["kernel"]
                view.layer_inputs[node.name] = xin.copy()
                env[node.name] = run_linear(node, xin)
                view.layer_outputs[node.name] = env[node.name].copy()
                view.trace.append({"seq": seq, "world": "normal", "op": node.kind, "node": node.name})
            elif node.kind in PLACEHOLDER_KINDS:
                cmd = Command.RUN_MERGE if node.kind == "TeeMerge" else Command.RUN_SHADOW
                ins = {k: env[k] for k in node.inputs}
                reply = self.channel.call(cmd, region=node.attrs["region"], inputs=ins)
                outs = reply["outputs"]
                env.update(outs)
                view.placeholder_io.append((node.name, {k: v.copy() for k, v in ins.items()}, {k: v.copy() for k, v in outs.items()}))
                view.trace.append({"seq": seq, "world": "secure", "op": cmd.value, "node": node.name})
            else:
                raise GraphError(f"Part A cannot contain {node.kind} node {node.name!r}")
        y = env[g.output]
        view.model_output = y.copy()
        return y, view


@dataclass
class Session:
    part_a: ModelGraph
    channel: SecureChannel
    normal: NormalWorld
    footprint: dict
    budget: int
    round_id: int = 0
    round_used: bool = True
    executor: SecureExecutor | None = field(default=None, repr=False)  # tests and diagnostics only

    def close(self) -> None:
        self.channel.call(Command.TEARDOWN)


def session_init(
    part_a: ModelGraph,
    part_b,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    mask_scale: float = 1.0,
    faults: dict | None = None,
    probe: dict | None = None,
) -> Session:
    """Start a secure session and load Part B (a PartB or its .snm bytes).

    ``faults`` and ``probe`` exist for negative tests and ``verify``
    diagnostics; a production session leaves both unset.
    """
    blob = part_b if isinstance(part_b, (bytes, bytearray)) else snm.dumps(part_b)
    executor = SecureExecutor(budget, faults, probe)
    channel = SecureChannel(executor)
    reply = channel.call(Command.LOAD_PART_B, part_b=bytes(blob), seed=seed, mask_scale=mask_scale)
    return Session(part_a, channel, NormalWorld(part_a, channel), reply["footprint"], budget, executor=executor)


def round_begin(session: Session, rng: Stream | int | None = None) -> int:
    """Refresh masks for a new round.  ``rng`` overrides the session's mask stream for this round."""
    session.round_id += 1
    payload = {"round": session.round_id}
    if rng is not None:
        payload["rng"] = as_stream(rng)
    session.channel.call(Command.RELOAD_MASKS, **payload)
    session.round_used = False
    return session.round_id


def infer(session: Session, x: np.ndarray) -> tuple:
    """One inference; each round's masks may be used once."""
    if session.round_used:
        raise ProtocolError("call round_begin before each inference; masks are single-use")
    session.round_used = True
    return session.normal.run(x)


def execute_teeshadow(channel: SecureChannel, placeholder_id: int, inputs: dict) -> dict:
    return channel.call(Command.RUN_SHADOW, region=placeholder_id, inputs=inputs)["outputs"]


def execute_teemerge(channel: SecureChannel, placeholder_id: int, inputs: dict) -> dict:
    return channel.call(Command.RUN_MERGE, region=placeholder_id, inputs=inputs)["outputs"]

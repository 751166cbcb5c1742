"""The ``.snm`` container used for models, Part A, Part B and tensors.

Layout, all integers little-endian::

    b"SNM1" | u32 format version | u64 header length | header (UTF-8 JSON)
    | zero padding to a 64-byte boundary | tensor blobs

The header is JSON with sorted keys and no whitespace, so equal objects
encode to equal bytes.  It holds ``kind`` (graph, part_a, part_b, tensor),
the encoded object (``body``) and a tensor table.  Each tensor entry records
dtype, shape, and byte offset from the start of the blob area.  Every blob
starts on a 64-byte boundary and is stored in C order.  Arrays inside the
body are references ``{"$t": index}`` into the table.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .convert import PartB, Region
from .errors import FormatError
from .graph import LayerSpec, ModelGraph

MAGIC = b"SNM1"
VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f4": np.float32, "f8": np.float64, "i8": np.int64}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}
KINDS = ("graph", "part_a", "part_b", "tensor")


def _pad(n: int) -> int:
    return -n % ALIGN


class _Encoder:
    def __init__(self):
        self.blobs: list = []
        self.table: list = []
        self.offset = 0

    def tensor(self, a: np.ndarray) -> dict:
        a = np.asarray(a)
        if a.dtype.kind in "iu":
            a = a.astype(np.int64)
        if a.dtype not in _CODES:
            raise FormatError(f"cannot store dtype {a.dtype}; supported: float32, float64, int64")
        data = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()
        self.table.append({"dtype": _CODES[a.dtype], "shape": list(a.shape), "offset": self.offset, "nbytes": len(data)})
        self.blobs.append(data + b"\0" * _pad(len(data)))
        self.offset += len(data) + _pad(len(data))
        return {"$t": len(self.table) - 1}

    def value(self, v):
        if isinstance(v, np.ndarray):
            return self.tensor(v)
        if isinstance(v, np.generic):
            return v.item()
        if isinstance(v, LayerSpec):
            return {"$node": self.node(v)}
        if isinstance(v, ModelGraph):
            return {"$graph": self.graph(v)}
        if isinstance(v, dict):
            for k in v:
                if not isinstance(k, str):
                    raise FormatError(f"dictionary keys must be strings, got {k!r}")
            return {k: self.value(v[k]) for k in sorted(v)}  # table order must not depend on insertion order
        if isinstance(v, (list, tuple)):
            return [self.value(x) for x in v]
        if v is None or isinstance(v, (bool, int, float, str)):
            return v
        raise FormatError(f"cannot serialize {type(v).__name__}")

    def node(self, n: LayerSpec) -> dict:
        return {
            "name": n.name,
            "kind": n.kind,
            "inputs": list(n.inputs),
            "outputs": list(n.outputs),
            "attrs": self.value(n.attrs),
            "weights": self.value(n.weights),
        }

    def graph(self, g: ModelGraph) -> dict:
        return {
            "nodes": [self.node(n) for n in g.nodes],
            "input_shape": list(g.input_shape),
            "input_name": g.input_name,
            "output": g.output,
        }

    def part_b(self, p: PartB) -> dict:
        regions = [
            {"id": r.region_id, "kind": r.kind, "inputs": r.inputs, "outputs": r.outputs, "nodes": [self.node(n) for n in r.nodes]}
            for _, r in sorted(p.regions.items())
        ]
        return {
            "regions": regions,
            "shapes": {k: list(v) for k, v in p.shapes.items()},
            "input_shape": list(p.input_shape),
            "output": p.output,
            "meta": self.value(p.meta),
        }


class _Decoder:
    def __init__(self, table: list, blob_area: memoryview):
        self.table = table
        self.area = blob_area

    def tensor(self, idx: int) -> np.ndarray:
        try:
            e = self.table[idx]
            dt = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
            count = int(np.prod(e["shape"], dtype=np.int64))
            if count * dt.itemsize != e["nbytes"] or e["offset"] % ALIGN:
                raise FormatError(f"tensor {idx}: inconsistent size or alignment")
            if e["offset"] + e["nbytes"] > len(self.area):
                raise FormatError(f"tensor {idx} runs past the end of the file")
            a = np.frombuffer(self.area, dtype=dt, count=count, offset=e["offset"])
        except (KeyError, IndexError, TypeError) as exc:
            raise FormatError(f"bad tensor table entry {idx}: {exc}") from exc
        return a.astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])

    def value(self, v):
        if isinstance(v, dict):
            if "$t" in v:
                return self.tensor(v["$t"])
            if "$node" in v:
                return self.node(v["$node"])
            if "$graph" in v:
                return self.graph(v["$graph"])
            return {k: self.value(x) for k, x in v.items()}
        if isinstance(v, list):
            return [self.value(x) for x in v]
        return v

    def node(self, d: dict) -> LayerSpec:
        return LayerSpec(d["name"], d["kind"], d["inputs"], self.value(d["attrs"]), self.value(d["weights"]), d["outputs"])

    def graph(self, d: dict) -> ModelGraph:
        return ModelGraph([self.node(n) for n in d["nodes"]], tuple(d["input_shape"]), d["output"], d["input_name"])

    def part_b(self, d: dict) -> PartB:
        regions = {
            r["id"]: Region(r["id"], r["kind"], r["inputs"], r["outputs"], [self.node(n) for n in r["nodes"]])
            for r in d["regions"]
        }
        shapes = {k: tuple(v) for k, v in d["shapes"].items()}
        return PartB(regions, shapes, tuple(d["input_shape"]), d["output"], self.value(d["meta"]))


def dumps(obj, kind: str | None = None) -> bytes:
    """Encode a ModelGraph, PartB or ndarray.  ``kind='part_a'`` tags a Part A graph."""
    enc = _Encoder()
    if isinstance(obj, PartB):
        kind, body = "part_b", enc.part_b(obj)
    elif isinstance(obj, ModelGraph):
        kind = kind or "graph"
        if kind not in ("graph", "part_a"):
            raise FormatError(f"a graph cannot be stored as {kind!r}")
        body = enc.graph(obj)
    elif isinstance(obj, np.ndarray):
        kind, body = "tensor", enc.tensor(obj)
    else:
        raise FormatError(f"cannot serialize {type(obj).__name__}")
    header = json.dumps(
        {"kind": kind, "body": body, "tensors": enc.table}, sort_keys=True, separators=(",", ":"), allow_nan=False
    ).encode("utf-8")
    head = _PREFIX.pack(MAGIC, VERSION, len(header)) + header
    return head + b"\0" * _pad(len(head)) + b"".join(enc.blobs)


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < _PREFIX.size:
        raise FormatError("file too short for an .snm header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not an .snm file")
    if version != VERSION:
        raise FormatError(f"unsupported .snm version {version}")
    end = _PREFIX.size + hlen
    if end > len(data):
        raise FormatError("header length runs past the end of the file")
    try:
        header = json.loads(data[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    if header.get("kind") not in KINDS:
        raise FormatError(f"unknown container kind {header.get('kind')!r}")
    return header, end + _pad(end)


def loads(data: bytes, expect: str | None = None):
    header, start = read_header(data)
    kind = header["kind"]
    if expect is not None and kind != expect:
        raise FormatError(f"expected an .snm {expect}, found {kind}")
    dec = _Decoder(header["tensors"], memoryview(data)[start:])
    try:
        if kind == "part_b":
            return dec.part_b(header["body"])
        if kind == "tensor":
            return dec.tensor(header["body"]["$t"])
        return dec.graph(header["body"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed {kind} body: missing {exc}") from exc


def save(path, obj, kind: str | None = None) -> None:
    Path(path).write_bytes(dumps(obj, kind))


def load(path, expect: str | None = None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    return loads(data, expect)


def kind_of(path) -> str:
    data = Path(path).read_bytes()
    return read_header(data)[0]["kind"]

"""Static network IR: typed nodes, shape inference, validation, JSON serialization.

Graphs are stored pre-lowered: composite blocks (PokeConv, PokeInit, the SE
gate, shortcut reshaping) appear as expanded primitive subgraphs, so analysis
passes never special-case them. Shapes are per-inference [H, W, C]; the batch
dimension exists only in the executor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from math import ceil, floor

SCHEMA_VERSION = 1


class DType(Enum):
    """Numeric format of one side of a MAC. The token is the wire name."""

    FP32 = "fp32"
    BF16 = "bf16"
    INT8 = "int8"
    INT4 = "int4"
    INT2 = "int2"
    BIN = "bin"

    @property
    def bits(self) -> int:
        return _DTYPE_BITS[self]

    @property
    def is_float(self) -> bool:
        return self in (DType.FP32, DType.BF16)

    @classmethod
    def from_token(cls, token: str) -> "DType":
        try:
            return cls(token)
        except ValueError:
            raise GraphSchemaError(f"unknown bitwidth token {token!r}") from None


_DTYPE_BITS = {
    DType.FP32: 32,
    DType.BF16: 16,
    DType.INT8: 8,
    DType.INT4: 4,
    DType.INT2: 2,
    DType.BIN: 1,
}

# Every op kind a node may carry. conv-like ops hold the bitwidth pair used
# for MAC bucketing; quantize_act marks executor fake-quant points.
OPS = frozenset({
    "conv2d", "depthwise_conv2d", "dense",
    "batchnorm", "dprelu", "relu", "hardsigmoid",
    "add", "multiply",
    "pad_channels", "tile_channels", "avg_channels",
    "avg_pool", "max_pool", "spatial_mean",
    "quantize_act", "input", "output",
})

# Attribute keys allowed per op; unknown keys are rejected on load.
_OP_ATTRS = {
    "conv2d": {"kernel", "stride", "padding", "out_channels", "groups",
               "act_bits", "weight_bits"},
    "depthwise_conv2d": {"kernel", "stride", "padding", "out_channels",
                         "act_bits", "weight_bits"},
    "dense": {"out_channels", "act_bits", "weight_bits"},
    "batchnorm": set(),
    "dprelu": set(),
    "relu": set(),
    "hardsigmoid": set(),
    "add": set(),
    "multiply": set(),
    "pad_channels": {"out_channels"},
    "tile_channels": {"out_channels"},
    "avg_channels": {"out_channels"},
    "avg_pool": {"kernel", "stride", "padding", "divisor"},
    "max_pool": {"kernel", "stride", "padding"},
    "spatial_mean": set(),
    "quantize_act": {"act_bits"},
    "input": set(),
    "output": set(),
}


class GraphError(ValueError):
    """Structural problem in a GraphSpec."""


class GraphSchemaError(GraphError):
    """Malformed serialized graph."""


class ShapeError(GraphError):
    """Shape inference failure; message names the offending node."""


@dataclass
class NodeSpec:
    id: str
    op: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.op not in OPS:
            raise GraphSchemaError(f"unknown op {self.op!r} in node {self.id!r}")


@dataclass
class GraphSpec:
    """Acyclic single-input/single-output network description.

    ``channel_multiplier`` is builder metadata and excluded from equality
    and serialization; the wire format carries only name, input shape, and
    the node list.
    """

    name: str
    input_shape: tuple[int, int, int]
    nodes: list[NodeSpec] = field(default_factory=list)
    channel_multiplier: Fraction | None = field(default=None, compare=False)

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def consumers(self, node_id: str) -> list[NodeSpec]:
        return [n for n in self.nodes if node_id in n.inputs]


ShapeMap = dict  # node id -> (H, W, C)


def conv_out_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return ceil(size / stride)
    if padding == "valid":
        return floor((size - kernel) / stride) + 1
    raise ShapeError(f"unknown padding mode {padding!r}")


def _spatial(attrs: dict, h: int, w: int) -> tuple[int, int]:
    kh, kw = attrs["kernel"]
    s = attrs["stride"]
    pad = attrs["padding"]
    return conv_out_size(h, kh, s, pad), conv_out_size(w, kw, s, pad)


def infer_shapes(g: GraphSpec) -> ShapeMap:
    """Deterministic per-node output shapes; raises ShapeError on failure."""
    shapes: ShapeMap = {}
    for node in g.nodes:
        ins = []
        for ref in node.inputs:
            if ref not in shapes:
                raise ShapeError(f"node {node.id!r}: input {ref!r} not yet defined")
            ins.append(shapes[ref])
        shapes[node.id] = _node_shape(node, ins, g.input_shape)
    return shapes


def _node_shape(node, ins, input_shape):
    op = node.op
    a = node.attrs
    if op == "input":
        return tuple(input_shape)
    if op in ("output", "batchnorm", "dprelu", "relu", "hardsigmoid",
              "quantize_act"):
        return ins[0]
    if op == "conv2d":
        h, w, c = ins[0]
        groups = a.get("groups", 1)
        if c % groups or a["out_channels"] % groups:
            raise ShapeError(
                f"node {node.id!r}: groups={groups} does not divide "
                f"channels {c}->{a['out_channels']}")
        oh, ow = _spatial(a, h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"node {node.id!r}: spatial size underflow")
        return (oh, ow, a["out_channels"])
    if op == "depthwise_conv2d":
        h, w, c = ins[0]
        if a["out_channels"] % c:
            raise ShapeError(
                f"node {node.id!r}: depthwise out_channels {a['out_channels']} "
                f"not a multiple of input channels {c}")
        oh, ow = _spatial(a, h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"node {node.id!r}: spatial size underflow")
        return (oh, ow, a["out_channels"])
    if op == "dense":
        h, w, c = ins[0]
        if (h, w) != (1, 1):
            raise ShapeError(f"node {node.id!r}: dense expects 1x1 spatial, got {h}x{w}")
        return (1, 1, a["out_channels"])
    if op == "add":
        if ins[0] != ins[1]:
            raise ShapeError(
                f"node {node.id!r}: add shape mismatch {ins[0]} vs {ins[1]}")
        return ins[0]
    if op == "multiply":
        s0, s1 = ins
        if s0[2] != s1[2]:
            raise ShapeError(
                f"node {node.id!r}: multiply channel mismatch {s0} vs {s1}")
        # per-channel gate [1,1,C] broadcasts against [H,W,C]
        if s0[:2] == (1, 1):
            return s1
        if s1[:2] == (1, 1) or s0 == s1:
            return s0
        raise ShapeError(f"node {node.id!r}: multiply shape mismatch {s0} vs {s1}")
    if op == "pad_channels":
        h, w, c = ins[0]
        if a["out_channels"] < c:
            raise ShapeError(f"node {node.id!r}: pad cannot shrink {c}->{a['out_channels']}")
        return (h, w, a["out_channels"])
    if op == "tile_channels":
        h, w, c = ins[0]
        if a["out_channels"] < c:
            raise ShapeError(
                f"node {node.id!r}: tile cannot shrink {c}->{a['out_channels']}")
        return (h, w, a["out_channels"])
    if op == "avg_channels":
        h, w, c = ins[0]
        if c % a["out_channels"]:
            raise ShapeError(
                f"node {node.id!r}: avg_channels {c}->{a['out_channels']} not integral")
        return (h, w, a["out_channels"])
    if op in ("avg_pool", "max_pool"):
        h, w, c = ins[0]
        oh, ow = _spatial(a, h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"node {node.id!r}: spatial size underflow")
        return (oh, ow, c)
    if op == "spatial_mean":
        return (1, 1, ins[0][2])
    raise ShapeError(f"node {node.id!r}: unhandled op {op!r}")


def validate_graph(g: GraphSpec) -> list[str]:
    """All structural invariants; returns one diagnostic string per violation."""
    diags: list[str] = []
    seen: set[str] = set()
    inputs = [n for n in g.nodes if n.op == "input"]
    outputs = [n for n in g.nodes if n.op == "output"]
    if len(inputs) != 1:
        diags.append(f"graph must have exactly one input node, found {len(inputs)}")
    if len(outputs) != 1:
        diags.append(f"graph must have exactly one output node, found {len(outputs)}")
    for node in g.nodes:
        if node.id in seen:
            diags.append(f"node {node.id!r}: duplicate id")
        for ref in node.inputs:
            if ref not in seen:
                diags.append(f"node {node.id!r}: unresolved input {ref!r}")
        seen.add(node.id)
        extra = set(node.attrs) - _OP_ATTRS[node.op]
        if extra:
            diags.append(f"node {node.id!r}: unexpected attrs {sorted(extra)}")
        if node.op in ("conv2d", "depthwise_conv2d", "dense"):
            for key in ("act_bits", "weight_bits"):
                if not isinstance(node.attrs.get(key), DType):
                    diags.append(f"node {node.id!r}: missing or invalid {key}")
        elif node.op == "quantize_act":
            if not isinstance(node.attrs.get("act_bits"), DType):
                diags.append(f"node {node.id!r}: missing or invalid act_bits")
    if not diags:
        try:
            infer_shapes(g)
        except ShapeError as e:
            diags.append(str(e))
    return diags


# ---------------------------------------------------------------------------
# JSON wire format
# ---------------------------------------------------------------------------

_TOP_KEYS = {"name", "version", "input_shape", "nodes"}
_NODE_KEYS = {"id", "op", "inputs", "attrs"}


def _attr_to_json(key, value):
    if isinstance(value, DType):
        return value.value
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, (list, tuple)):
        return list(value)
    return value


def _attr_from_json(op, key, value):
    if key in ("act_bits", "weight_bits"):
        return DType.from_token(value)
    if key == "divisor":
        if isinstance(value, str):
            return Fraction(value)
        return Fraction(value)
    if key == "kernel":
        return list(value)
    return value


def graph_to_json(g: GraphSpec) -> dict:
    return {
        "name": g.name,
        "version": SCHEMA_VERSION,
        "input_shape": list(g.input_shape),
        "nodes": [
            {
                "id": n.id,
                "op": n.op,
                "inputs": list(n.inputs),
                "attrs": {k: _attr_to_json(k, v) for k, v in n.attrs.items()},
            }
            for n in g.nodes
        ],
    }


def graph_from_json(doc: dict) -> GraphSpec:
    if not isinstance(doc, dict):
        raise GraphSchemaError("top level must be an object")
    extra = set(doc) - _TOP_KEYS
    if extra:
        raise GraphSchemaError(f"unknown top-level keys {sorted(extra)}")
    missing = _TOP_KEYS - set(doc)
    if missing:
        raise GraphSchemaError(f"missing top-level keys {sorted(missing)}")
    if doc["version"] != SCHEMA_VERSION:
        raise GraphSchemaError(
            f"schema version mismatch: expected {SCHEMA_VERSION}, got {doc['version']}")
    nodes = []
    for i, nd in enumerate(doc["nodes"]):
        extra = set(nd) - _NODE_KEYS
        if extra:
            raise GraphSchemaError(f"node #{i}: unknown keys {sorted(extra)}")
        if "id" not in nd or "op" not in nd:
            raise GraphSchemaError(f"node #{i}: missing id or op")
        op = nd["op"]
        if op not in OPS:
            raise GraphSchemaError(f"node #{i}: unknown op {op!r}")
        raw_attrs = nd.get("attrs", {})
        extra = set(raw_attrs) - _OP_ATTRS[op]
        if extra:
            raise GraphSchemaError(f"node {nd.get('id')!r}: unknown attrs {sorted(extra)}")
        attrs = {k: _attr_from_json(op, k, v) for k, v in raw_attrs.items()}
        nodes.append(NodeSpec(id=nd["id"], op=op, inputs=list(nd.get("inputs", [])),
                              attrs=attrs))
    shape = doc["input_shape"]
    if len(shape) != 3:
        raise GraphSchemaError(f"input_shape must be [H, W, C], got {shape}")
    return GraphSpec(name=doc["name"], input_shape=tuple(shape), nodes=nodes)


def save_graph(g: GraphSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(graph_to_json(g), f, indent=1)
        f.write("\n")


def load_graph(path) -> GraphSpec:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise GraphSchemaError(
                f"parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return graph_from_json(doc)

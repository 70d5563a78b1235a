"""Quantized network graph: tensors, node kinds, validation and shape inference.

Tensors are NHWC with N == 1. Quantization is symmetric per tensor (zero
point 0); the float ``scale`` is carried for reporting only, all arithmetic
uses integer (multiplier, shift) requantization pairs.

Weighted nodes (Conv2D, DepthwiseConv2D, Dense) reference one contiguous
slice of the shared weight blob: the i8 kernel in C-order followed by one
little-endian i32 bias per output channel. Kernel layouts:

    Conv2D           (C_out, K_h, K_w, C_in)
    DepthwiseConv2D  (C, K_h, K_w)
    Dense            (out_features, in_features)

so any run of output channels is a contiguous byte range.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ModelError

I8_MIN, I8_MAX = -128, 127
MAX_MULTIPLIER = 2**31 - 1
MAX_SHIFT = 62


class DType(str, Enum):
    I8 = "i8"
    I32 = "i32"

    @property
    def itemsize(self) -> int:
        return 1 if self is DType.I8 else 4

    @property
    def numpy(self):
        return np.dtype(np.int8) if self is DType.I8 else np.dtype("<i4")


class Pad(str, Enum):
    VALID = "valid"
    SAME = "same"


@dataclass(frozen=True)
class TensorDesc:
    name: str
    shape: Optional[Tuple[int, int, int, int]]
    dtype: DType = DType.I8
    scale: float = 1.0

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype.itemsize

    @property
    def hwc(self) -> Tuple[int, int, int]:
        return self.shape[1], self.shape[2], self.shape[3]


@dataclass(frozen=True)
class Requant:
    """Fixed-point rescale: ``round(acc * multiplier / 2**shift)``."""

    multiplier: int
    shift: int

    def check(self, node=None):
        if not (1 <= self.multiplier <= MAX_MULTIPLIER):
            raise ModelError(f"requant multiplier {self.multiplier} outside 1..2^31-1", node)
        if not (0 <= self.shift <= MAX_SHIFT):
            raise ModelError(f"requant shift {self.shift} outside 0..{MAX_SHIFT}", node)


def conv_geometry(h, w, kh, kw, stride, pad):
    """Output size and (top, bottom, left, right) padding for a 2-D window op."""
    pad = Pad(pad)
    if pad is Pad.SAME:
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    else:
        if kh > h or kw > w:
            raise ModelError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    if kh > h + pads[0] + pads[1] or kw > w + pads[2] + pads[3]:
        raise ModelError(f"kernel {kh}x{kw} larger than padded input")
    return ho, wo, pads


# --------------------------------------------------------------------------
# Node kinds
# --------------------------------------------------------------------------


class NodeKind:
    """Base for all node kinds. Subclasses are frozen dataclasses."""

    arity: ClassVar[int] = 1
    has_weights: ClassVar[bool] = False

    @property
    def kind(self) -> str:
        return type(self).__name__

    def attrs(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, Requant):
                v = {"multiplier": v.multiplier, "shift": v.shift}
            out[f.name] = v
        return out

    @classmethod
    def from_attrs(cls, attrs: Mapping):
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(attrs) - set(names)
        if unknown:
            raise ModelError(f"{cls.__name__}: unknown attributes {sorted(unknown)}")
        kw = {}
        for name, value in attrs.items():
            if name == "requant" and value is not None:
                value = Requant(int(value["multiplier"]), int(value["shift"]))
            elif name == "pad":
                value = Pad(value)
            elif name == "output_dtype":
                value = DType(value)
            kw[name] = value
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ModelError(f"{cls.__name__}: {exc}") from None

    def check(self, node=None):
        """Attribute invariants."""

    def infer(self, inputs: Sequence[TensorDesc], node=None) -> Tuple[tuple, DType]:
        raise NotImplementedError

    def _expect_dtype(self, inputs, dtype, node):
        for t in inputs:
            if t.dtype is not dtype:
                raise ModelError(
                    f"{self.kind} expects {dtype.value} input, got {t.dtype.value} ({t.name})", node
                )


class _WeightedMixin:
    has_weights: ClassVar[bool] = True

    def _check_requant(self, node):
        if self.output_dtype is DType.I8 and self.requant is None:
            raise ModelError(f"{self.kind} with i8 output needs requant parameters", node)
        if self.output_dtype is DType.I32 and self.requant is not None:
            raise ModelError(f"{self.kind} with i32 output must not carry requant", node)
        if self.requant is not None:
            self.requant.check(node)


@dataclass(frozen=True)
class Conv2D(_WeightedMixin, NodeKind):
    kernel_h: int
    kernel_w: int
    stride: int
    pad: Pad
    out_channels: int
    fuse_relu: bool = False
    output_dtype: DType = DType.I32
    requant: Optional[Requant] = None

    def check(self, node=None):
        _positive(node, kernel_h=self.kernel_h, kernel_w=self.kernel_w, stride=self.stride,
                  out_channels=self.out_channels)
        self._check_requant(node)

    def kernel_shape(self, in_desc: TensorDesc):
        return (self.out_channels, self.kernel_h, self.kernel_w, in_desc.shape[3])

    def infer(self, inputs, node=None):
        (x,) = inputs
        self._expect_dtype(inputs, DType.I8, node)
        _, h, w, _ = x.shape
        try:
            ho, wo, _ = conv_geometry(h, w, self.kernel_h, self.kernel_w, self.stride, self.pad)
        except ModelError as exc:
            raise ModelError(str(exc), node) from None
        return (1, ho, wo, self.out_channels), self.output_dtype


@dataclass(frozen=True)
class DepthwiseConv2D(_WeightedMixin, NodeKind):
    kernel_h: int
    kernel_w: int
    stride: int
    pad: Pad
    output_dtype: DType = DType.I32
    requant: Optional[Requant] = None
    channel_multiplier: int = 1

    def check(self, node=None):
        _positive(node, kernel_h=self.kernel_h, kernel_w=self.kernel_w, stride=self.stride)
        if self.channel_multiplier != 1:
            raise ModelError("depthwise channel_multiplier must be 1", node)
        self._check_requant(node)

    def kernel_shape(self, in_desc: TensorDesc):
        return (in_desc.shape[3], self.kernel_h, self.kernel_w)

    def infer(self, inputs, node=None):
        (x,) = inputs
        self._expect_dtype(inputs, DType.I8, node)
        _, h, w, c = x.shape
        try:
            ho, wo, _ = conv_geometry(h, w, self.kernel_h, self.kernel_w, self.stride, self.pad)
        except ModelError as exc:
            raise ModelError(str(exc), node) from None
        return (1, ho, wo, c), self.output_dtype


@dataclass(frozen=True)
class Dense(_WeightedMixin, NodeKind):
    out_features: int
    output_dtype: DType = DType.I32
    requant: Optional[Requant] = None

    def check(self, node=None):
        _positive(node, out_features=self.out_features)
        self._check_requant(node)

    def kernel_shape(self, in_desc: TensorDesc):
        return (self.out_features, in_desc.size)

    def infer(self, inputs, node=None):
        self._expect_dtype(inputs, DType.I8, node)
        return (1, 1, 1, self.out_features), self.output_dtype


@dataclass(frozen=True)
class Requantize(NodeKind):
    multiplier: int
    shift: int
    clamp_lo: int = I8_MIN
    clamp_hi: int = I8_MAX
    barrier: bool = False

    @property
    def params(self) -> Requant:
        return Requant(self.multiplier, self.shift)

    def check(self, node=None):
        self.params.check(node)
        if not (I8_MIN <= self.clamp_lo <= self.clamp_hi <= I8_MAX):
            raise ModelError(f"bad clamp range [{self.clamp_lo}, {self.clamp_hi}]", node)

    def infer(self, inputs, node=None):
        return inputs[0].shape, DType.I8


@dataclass(frozen=True)
class Relu(NodeKind):
    def infer(self, inputs, node=None):
        self._expect_dtype(inputs, DType.I8, node)
        return inputs[0].shape, DType.I8


@dataclass(frozen=True)
class LeakyRelu(NodeKind):
    multiplier: int
    shift: int

    def check(self, node=None):
        Requant(self.multiplier, self.shift).check(node)

    def infer(self, inputs, node=None):
        self._expect_dtype(inputs, DType.I8, node)
        return inputs[0].shape, DType.I8


@dataclass(frozen=True)
class MaxPool(NodeKind):
    k: int
    stride: int

    def check(self, node=None):
        _positive(node, k=self.k, stride=self.stride)

    def infer(self, inputs, node=None):
        self._expect_dtype(inputs, DType.I8, node)
        _, h, w, c = inputs[0].shape
        try:
            ho, wo, _ = conv_geometry(h, w, self.k, self.k, self.stride, Pad.VALID)
        except ModelError as exc:
            raise ModelError(str(exc), node) from None
        return (1, ho, wo, c), DType.I8


@dataclass(frozen=True)
class AvgPool(NodeKind):
    k: int
    stride: int
    multiplier: int
    shift: int

    def check(self, node=None):
        _positive(node, k=self.k, stride=self.stride)
        Requant(self.multiplier, self.shift).check(node)

    infer = MaxPool.infer


class _Elementwise(NodeKind):
    dtype: ClassVar[DType] = DType.I8

    def infer(self, inputs, node=None):
        self._expect_dtype(inputs, self.dtype, node)
        shapes = {t.shape for t in inputs}
        if len(shapes) != 1:
            raise ModelError(
                f"{self.kind} needs operands of identical shape, got "
                + ", ".join(f"{t.name}{list(t.shape)}" for t in inputs),
                node,
            )
        return inputs[0].shape, self.dtype


@dataclass(frozen=True)
class EwAdd(_Elementwise):
    arity: ClassVar[int] = 2


@dataclass(frozen=True)
class EwAdd32(_Elementwise):
    arity: ClassVar[int] = 2
    dtype: ClassVar[DType] = DType.I32


@dataclass(frozen=True)
class EwAbs(_Elementwise):
    pass


@dataclass(frozen=True)
class EwMin(_Elementwise):
    arity: ClassVar[int] = 2


@dataclass(frozen=True)
class EwMax(_Elementwise):
    arity: ClassVar[int] = 2


NODE_KINDS: Dict[str, type] = {
    cls.__name__: cls
    for cls in (Conv2D, DepthwiseConv2D, Dense, Requantize, Relu, LeakyRelu, MaxPool, AvgPool,
                EwAdd, EwAdd32, EwAbs, EwMin, EwMax)
}

#: kinds allowed to consume i32 tensors
I32_CONSUMERS = (Requantize, EwAdd32)


def _positive(node, **values):
    for name, v in values.items():
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
            raise ModelError(f"{name} must be a positive integer, got {v!r}", node)


# --------------------------------------------------------------------------
# Graph
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightRef:
    offset: int
    length: int


@dataclass(frozen=True)
class Node:
    id: str
    op: NodeKind
    inputs: Tuple[str, ...]
    output: str
    weight: Optional[WeightRef] = None

    @property
    def kind(self) -> str:
        return self.op.kind


@dataclass(frozen=True)
class Graph:
    """Immutable quantized network. ``nodes`` are kept in topological order."""

    nodes: Tuple[Node, ...]
    tensors: Dict[str, TensorDesc]
    weights: bytes = b""
    inputs: Tuple[str, ...] = ()
    outputs: Tuple[str, ...] = ()
    name: str = ""
    _index: Dict[str, Node] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {n.id: n for n in self.nodes})

    def node(self, node_id: str) -> Node:
        return self._index[node_id]

    def producers(self) -> Dict[str, str]:
        """tensor name -> producing node id"""
        return {n.output: n.id for n in self.nodes}

    def consumers(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {t: [] for t in self.tensors}
        for n in self.nodes:
            for t in n.inputs:
                out.setdefault(t, []).append(n.id)
        return out

    def kernel(self, node: Node) -> np.ndarray:
        shape = node.op.kernel_shape(self.tensors[node.inputs[0]])
        count = math.prod(shape)
        return np.frombuffer(self.weights, np.int8, count, node.weight.offset).reshape(shape)

    def bias(self, node: Node) -> np.ndarray:
        shape = node.op.kernel_shape(self.tensors[node.inputs[0]])
        return np.frombuffer(
            self.weights, "<i4", shape[0], node.weight.offset + math.prod(shape)
        ).astype(np.int32)

    def replace(self, **changes) -> "Graph":
        return dataclasses.replace(self, **changes)


def expected_weight_bytes(node: Node, in_desc: TensorDesc) -> int:
    shape = node.op.kernel_shape(in_desc)
    return math.prod(shape) + 4 * shape[0]


def topological_order(nodes: Sequence[Node], graph_inputs: Iterable[str]) -> List[Node]:
    """Kahn's algorithm, stable with respect to the given node order."""
    produced = {n.output: n for n in nodes}
    pending = {n.id: sum(1 for t in set(n.inputs) if t in produced) for n in nodes}
    users: Dict[str, List[Node]] = {}
    for n in nodes:
        for t in set(n.inputs):
            if t in produced:
                users.setdefault(t, []).append(n)
    position = {n.id: i for i, n in enumerate(nodes)}
    ready = sorted((n for n in nodes if pending[n.id] == 0), key=lambda n: position[n.id])
    order: List[Node] = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        fresh = []
        for u in users.get(n.output, []):
            pending[u.id] -= 1
            if pending[u.id] == 0:
                fresh.append(u)
        if fresh:
            ready = sorted(ready + fresh, key=lambda m: position[m.id])
    if len(order) != len(nodes):
        stuck = sorted(set(pending) - {n.id for n in order})
        raise ModelError(f"graph contains a cycle through nodes {stuck}")
    return order


def infer_shapes(graph: Graph) -> Graph:
    """Return a graph whose every tensor has a concrete shape and dtype.

    Declared shapes/dtypes of produced tensors must agree with inference.
    """
    tensors = dict(graph.tensors)
    for name in graph.inputs:
        desc = tensors.get(name)
        if desc is None:
            raise ModelError(f"graph input {name!r} is not a declared tensor")
        if desc.shape is None:
            raise ModelError(f"graph input {name!r} has no shape")
        if desc.dtype is None:
            tensors[name] = dataclasses.replace(desc, dtype=DType.I8)
    for node in topological_order(graph.nodes, graph.inputs):
        ins = []
        for t in node.inputs:
            if t not in tensors:
                raise ModelError(f"undefined tensor {t!r}", node.id)
            if tensors[t].shape is None:
                raise ModelError(f"tensor {t!r} has no producer and no shape", node.id)
            ins.append(tensors[t])
        if node.output not in tensors:
            raise ModelError(f"undefined tensor {node.output!r}", node.id)
        shape, dtype = node.op.infer(ins, node.id)
        if node.op.has_weights and node.weight is not None:
            need = expected_weight_bytes(node, ins[0])
            if node.weight.length != need:
                raise ModelError(
                    f"weight length {node.weight.length} inconsistent with channel counts "
                    f"(expected {need})",
                    node.id,
                )
        out = tensors[node.output]
        if out.shape is not None and tuple(out.shape) != tuple(shape):
            raise ModelError(
                f"shape mismatch on {out.name!r}: declared {list(out.shape)}, inferred {list(shape)}",
                node.id,
            )
        if out.dtype is not None and out.dtype is not dtype:
            raise ModelError(
                f"dtype mismatch on {out.name!r}: declared {out.dtype.value}, inferred {dtype.value}",
                node.id,
            )
        tensors[node.output] = dataclasses.replace(out, shape=tuple(shape), dtype=dtype)
    return graph.replace(tensors=tensors)


def validate(graph: Graph) -> Graph:
    """Check every structural invariant; return the shape-inferred graph.

    Raises ModelError naming the offending node or tensor.
    """
    for name, desc in graph.tensors.items():
        if desc.name != name:
            raise ModelError(f"tensor key {name!r} does not match its name {desc.name!r}")
        if desc.shape is not None:
            if len(desc.shape) != 4 or any(int(e) < 1 for e in desc.shape):
                raise ModelError(f"tensor {name!r}: shape {list(desc.shape)} must be 4 extents >= 1")
            if desc.shape[0] != 1:
                raise ModelError(f"tensor {name!r}: batch extent must be 1")
        if not (desc.scale > 0 and math.isfinite(desc.scale)):
            raise ModelError(f"tensor {name!r}: scale must be positive")

    seen_ids = set()
    producer: Dict[str, str] = {}
    for node in graph.nodes:
        if node.id in seen_ids:
            raise ModelError("duplicate node id", node.id)
        seen_ids.add(node.id)
        if not isinstance(node.op, NodeKind) or node.kind not in NODE_KINDS:
            raise ModelError(f"unknown node kind {node.op!r}", node.id)
        node.op.check(node.id)
        if len(node.inputs) != node.op.arity:
            raise ModelError(
                f"{node.kind} takes {node.op.arity} input(s), got {len(node.inputs)}", node.id
            )
        for t in (*node.inputs, node.output):
            if t not in graph.tensors:
                raise ModelError(f"undefined tensor {t!r}", node.id)
        if node.output in producer:
            raise ModelError(
                f"tensor {node.output!r} already produced by node {producer[node.output]}", node.id
            )
        if node.output in graph.inputs:
            raise ModelError(f"node writes graph input {node.output!r}", node.id)
        producer[node.output] = node.id
        if node.op.has_weights:
            if node.weight is None:
                raise ModelError("missing weight reference", node.id)
            if node.weight.offset < 0 or node.weight.length < 0 or (
                node.weight.offset + node.weight.length > len(graph.weights)
            ):
                raise ModelError(
                    f"weight reference [{node.weight.offset}, "
                    f"{node.weight.offset + node.weight.length}) overruns blob of "
                    f"{len(graph.weights)} bytes",
                    node.id,
                )
        elif node.weight is not None:
            raise ModelError(f"{node.kind} takes no weights", node.id)

    for name in (*graph.inputs, *graph.outputs):
        if name not in graph.tensors:
            raise ModelError(f"graph input/output {name!r} is not a declared tensor")
    for name in graph.tensors:
        if name not in producer and name not in graph.inputs:
            raise ModelError(f"tensor {name!r} has no producer and is not a graph input")

    inferred = infer_shapes(graph)
    ordered = topological_order(graph.nodes, graph.inputs)

    i32_ok = {n.id for n in graph.nodes if isinstance(n.op, I32_CONSUMERS)}
    for node in graph.nodes:
        for t in node.inputs:
            if inferred.tensors[t].dtype is DType.I32 and node.id not in i32_ok:
                raise ModelError(f"{node.kind} cannot consume i32 tensor {t!r}", node.id)
    for name in graph.inputs:
        if inferred.tensors[name].dtype is not DType.I8:
            raise ModelError(f"graph input {name!r} must be i8")

    return inferred.replace(nodes=tuple(ordered))

"""Reference interpreter: exact integer semantics for every node kind.

This is the golden model the simulator is checked against, and the engine
that runs CPU-fallback nodes during end-to-end execution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, TextIO

import numpy as np

from . import kernels
from .errors import EvalError, ModelError
from .graph import (
    AvgPool, Conv2D, Dense, DepthwiseConv2D, DType, EwAbs, EwAdd, EwAdd32, EwMax, EwMin, Graph,
    LeakyRelu, MaxPool, Node, NodeKind, Relu, Requantize, TensorDesc, conv_geometry,
)


@dataclass(frozen=True)
class TensorValue:
    desc: TensorDesc
    data: np.ndarray

    def __post_init__(self):
        expected = self.desc.dtype.numpy
        data = np.asarray(self.data)
        if data.size != self.desc.size:
            raise EvalError(
                f"tensor {self.desc.name!r}: {data.size} values for shape {list(self.desc.shape)}"
            )
        if data.dtype != expected:
            if self.desc.dtype is DType.I8 and data.size and (data.min() < -128 or data.max() > 127):
                raise EvalError(f"tensor {self.desc.name!r}: value outside i8 range")
            data = data.astype(expected)
        object.__setattr__(self, "data", data.reshape(self.desc.shape))

    @property
    def flat(self) -> np.ndarray:
        return self.data.ravel()

    def to_bytes(self) -> bytes:
        return self.data.astype(self.desc.dtype.numpy).tobytes()

    @classmethod
    def from_bytes(cls, desc: TensorDesc, raw) -> "TensorValue":
        return cls(desc, np.frombuffer(bytes(raw), desc.dtype.numpy).reshape(desc.shape))


def _check_inputs(kind: NodeKind, inputs: Sequence[TensorValue]):
    if len(inputs) != kind.arity:
        raise EvalError(f"{kind.kind} takes {kind.arity} input(s), got {len(inputs)}")
    try:
        shape, dtype = kind.infer([v.desc for v in inputs])
    except ModelError as exc:
        raise EvalError(str(exc)) from None
    return shape, dtype


def eval_node(kind: NodeKind, inputs: Sequence[TensorValue], weights=None, bias=None,
              out_desc: TensorDesc = None) -> TensorValue:
    """Evaluate one node.

    ``weights``/``bias`` are the kernel array (see graph layouts) and i32 bias
    for weighted kinds. ``out_desc`` names the result; a default is derived.
    """
    shape, dtype = _check_inputs(kind, inputs)
    if out_desc is None:
        out_desc = TensorDesc("out", tuple(shape), dtype)
    elif tuple(out_desc.shape) != tuple(shape) or out_desc.dtype is not dtype:
        raise EvalError(f"{kind.kind}: output descriptor does not match inferred {list(shape)}")

    x = inputs[0].data[0]  # (H, W, C)
    if isinstance(kind, (Conv2D, DepthwiseConv2D)):
        _, _, pads = conv_geometry(x.shape[0], x.shape[1], kind.kernel_h, kind.kernel_w,
                                     kind.stride, kind.pad)
        w = np.asarray(weights, dtype=np.int8)
        if isinstance(kind, Conv2D):
            if w.shape != kind.kernel_shape(inputs[0].desc):
                raise EvalError(f"Conv2D kernel shape {w.shape} does not match input")
            acc = kernels.conv2d_acc(x, w, bias, kind.stride, pads)
            rq = (kind.requant.multiplier, kind.requant.shift) if kind.requant else None
            out = kernels.finish_conv(acc, rq, kind.fuse_relu)
        else:
            if w.shape != kind.kernel_shape(inputs[0].desc):
                raise EvalError(f"DepthwiseConv2D kernel shape {w.shape} does not match input")
            acc = kernels.depthwise_acc(x, w, bias, kind.stride, pads)
            rq = (kind.requant.multiplier, kind.requant.shift) if kind.requant else None
            out = kernels.finish_conv(acc, rq)
    elif isinstance(kind, Dense):
        w = np.asarray(weights, dtype=np.int8)
        if w.shape != kind.kernel_shape(inputs[0].desc):
            raise EvalError(f"Dense weight shape {w.shape} does not match input")
        acc = kernels.dense_acc(inputs[0].flat, w, bias)
        rq = (kind.requant.multiplier, kind.requant.shift) if kind.requant else None
        out = kernels.finish_conv(acc, rq)
    elif isinstance(kind, Requantize):
        out = kernels.requantize(x, kind.multiplier, kind.shift, kind.clamp_lo, kind.clamp_hi)
    elif isinstance(kind, Relu):
        out = np.maximum(x, 0).astype(np.int8)
    elif isinstance(kind, LeakyRelu):
        out = kernels.leaky_relu(x, kind.multiplier, kind.shift)
    elif isinstance(kind, MaxPool):
        out = kernels.max_pool(x, kind.k, kind.stride)
    elif isinstance(kind, AvgPool):
        out = kernels.avg_pool(x, kind.k, kind.stride, kind.multiplier, kind.shift)
    elif isinstance(kind, EwAdd):
        out = kernels.saturate_i8(x.astype(np.int64) + inputs[1].data[0])
    elif isinstance(kind, EwAdd32):
        out = kernels.wrap_i32(x.astype(np.int64) + inputs[1].data[0])
    elif isinstance(kind, EwAbs):
        out = kernels.saturate_i8(np.abs(x.astype(np.int64)))
    elif isinstance(kind, EwMin):
        out = np.minimum(x, inputs[1].data[0])
    elif isinstance(kind, EwMax):
        out = np.maximum(x, inputs[1].data[0])
    else:  # pragma: no cover - NODE_KINDS is closed
        raise EvalError(f"no semantics for {kind.kind}")
    return TensorValue(out_desc, np.asarray(out).reshape(shape))


def eval_graph_node(graph: Graph, node: Node, env: Dict[str, TensorValue]) -> TensorValue:
    ins = [env[t] for t in node.inputs]
    w = b = None
    if node.op.has_weights:
        w, b = graph.kernel(node), graph.bias(node)
    try:
        return eval_node(node.op, ins, w, b, graph.tensors[node.output])
    except EvalError as exc:
        raise EvalError(f"node {node.id}: {exc}") from None


def bind_inputs(graph: Graph, inputs) -> Dict[str, TensorValue]:
    """Accept a list (graph input order), a dict, or arrays; return name -> TensorValue."""
    if isinstance(inputs, dict):
        items = [(name, inputs[name]) for name in graph.inputs]
    else:
        inputs = list(inputs)
        if len(inputs) != len(graph.inputs):
            raise EvalError(f"graph takes {len(graph.inputs)} inputs, got {len(inputs)}")
        items = list(zip(graph.inputs, inputs))
    env = {}
    for name, value in items:
        desc = graph.tensors[name]
        if isinstance(value, TensorValue):
            if tuple(value.desc.shape) != tuple(desc.shape) or value.desc.dtype is not desc.dtype:
                raise EvalError(f"input {name!r} does not match graph descriptor")
            value = value.data
        env[name] = TensorValue(desc, np.asarray(value))
    return env


def interpret(graph: Graph, inputs) -> List[TensorValue]:
    """Run the whole graph in topological order; returns graph outputs."""
    env = bind_inputs(graph, inputs)
    for node in graph.nodes:
        env[node.output] = eval_graph_node(graph, node, env)
    return [env[name] for name in graph.outputs]


# -- tensor dump format ------------------------------------------------------


def dump_tensors(values: Iterable[TensorValue], fh: TextIO):
    """Write ``name shape dtype`` headers followed by one value per line."""
    for v in values:
        shape = "x".join(str(e) for e in v.desc.shape)
        fh.write(f"{v.desc.name} {shape} {v.desc.dtype.value}\n")
        fh.write("".join(f"{int(x)}\n" for x in v.flat))


def load_tensor_dump(fh: TextIO) -> List[TensorValue]:
    lines = [ln.strip() for ln in fh if ln.strip()]
    out, i = [], 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 3:
            raise ValueError(f"line {i + 1}: expected 'name shape dtype' header")
        name, shape_s, dtype_s = parts
        shape = tuple(int(e) for e in shape_s.split("x"))
        desc = TensorDesc(name, shape, DType(dtype_s))
        n = desc.size
        vals = np.array([int(x) for x in lines[i + 1:i + 1 + n]], dtype=np.int64)
        if vals.size != n:
            raise ValueError(f"tensor {name!r}: expected {n} values, found {vals.size}")
        out.append(TensorValue(desc, vals))
        i += 1 + n
    return out

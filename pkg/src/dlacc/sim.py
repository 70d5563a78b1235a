"""Functional and cycle-cost simulator for command streams.

Compute cycles (per instruction, ``P`` = PE count, ``C_t`` = OFM_C):

    conv, output parallel   H_o*W_o*K_h*K_w*C_in*ceil(C_t/P)
    conv, input parallel    H_o*W_o*K_h*K_w*C_t*ceil(C_in/P)
    depthwise (native)      H_o*W_o*K_h*K_w*ceil(C_t/P)
    pooling                 H_o*W_o*k*k*ceil(C_t/P)
    activation/elementwise  ceil(N/P)
    requantize              ceil(N*lane_divisor/P) + setup

OP_MAT_MUL is the 1x1 conv on a 1x1 map. DMA costs ``ceil(bytes/bus)`` and is
accumulated separately from compute cycles, as is register traffic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .artifact import SubgraphArtifact, emit_subgraph_artifact
from .codegen import CommandStream, generate_command_stream
from .errors import StreamError
from .graph import DType, Graph
from .interp import TensorValue, bind_inputs, eval_graph_node
from .isa import (
    CONV_OPS, DMA_OPS, DTYPE_I32, POOL_AVG, WEIGHT_BUFFER, IsaVariant, Op, ParallelMode, Reg,
    registers_read, sram_ranges, to_i32,
)
from .partition import KIND_ORDER, PartitionedGraph, SubgraphKind

TAG_NONE, TAG_I8, TAG_I32 = 0, 1, 4


def _ceil(a: int, b: int) -> int:
    return -(-a // b)


def conv_cycles(ho, wo, kh, kw, cin, ct, variant: IsaVariant) -> int:
    p = variant.pe_count
    if variant.parallel_mode is ParallelMode.OUTPUT:
        return ho * wo * kh * kw * cin * _ceil(ct, p)
    return ho * wo * kh * kw * ct * _ceil(cin, p)


def cycle_cost(op: Op, regs: Dict[int, int], variant: IsaVariant) -> Tuple[int, int]:
    """(compute cycles, useful lane operations) of one instruction.

    Lane operations are MACs for conv-like instructions and element/window
    operations otherwise; DMA instructions cost no compute cycles.
    """
    r = regs.get
    p = variant.pe_count
    if op in DMA_OPS:
        return 0, 0
    if op is Op.MAT_MUL:
        cin, ct = r(Reg.IFM_C), r(Reg.OFM_C)
        return conv_cycles(1, 1, 1, 1, cin, ct, variant), cin * ct
    if op in CONV_OPS:
        ho, wo, ct = r(Reg.OFM_H), r(Reg.OFM_W), r(Reg.OFM_C)
        kk = r(Reg.KERNEL_H) * r(Reg.KERNEL_W)
        if op is Op.DEPTH_CONV:
            return ho * wo * kk * _ceil(ct, p), ho * wo * kk * ct
        cin = r(Reg.IFM_C)
        return conv_cycles(ho, wo, r(Reg.KERNEL_H), r(Reg.KERNEL_W), cin, ct, variant), \
            ho * wo * kk * cin * ct
    if op is Op.POOL:
        ho, wo, ct, k = r(Reg.OFM_H), r(Reg.OFM_W), r(Reg.OFM_C), r(Reg.KERNEL_H)
        return ho * wo * k * k * _ceil(ct, p), ho * wo * k * k * ct
    n = r(Reg.OFM_H) * r(Reg.OFM_W) * r(Reg.OFM_C)
    if op is Op.REQUANT:
        return _ceil(n * variant.requant_lane_divisor, p) + variant.requant_setup_cycles, n
    return _ceil(n, p), n


def dma_cycles(nbytes: int, variant: IsaVariant) -> int:
    return _ceil(nbytes, variant.bus_bytes_per_cycle)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass
class KindMetrics:
    cycles: int = 0
    macs: int = 0
    dma_bytes_read: int = 0
    dma_bytes_written: int = 0
    dma_cycles: int = 0
    register_writes: int = 0
    instructions: int = 0

    def add(self, other: "KindMetrics"):
        for f in self.__dataclass_fields__:
            setattr(self, f, getattr(self, f) + getattr(other, f))

    @property
    def dma_bytes(self) -> int:
        return self.dma_bytes_read + self.dma_bytes_written


@dataclass
class Metrics:
    pe_count: int
    kinds: Dict[SubgraphKind, KindMetrics] = field(
        default_factory=lambda: {k: KindMetrics() for k in KIND_ORDER})
    cpu_fallback_node_count: int = 0

    def __getitem__(self, kind) -> KindMetrics:
        return self.kinds[SubgraphKind(kind)]

    def utilization(self, kind=None) -> float:
        m = self.total if kind is None else self[kind]
        return m.macs / (self.pe_count * m.cycles) if m.cycles else 0.0

    @property
    def total(self) -> KindMetrics:
        out = KindMetrics()
        for m in self.kinds.values():
            out.add(m)
        return out

    def merge(self, other: "Metrics"):
        for k, m in other.kinds.items():
            self.kinds[k].add(m)
        self.cpu_fallback_node_count += other.cpu_fallback_node_count

    def to_dict(self) -> dict:
        def row(m: KindMetrics, util):
            return {
                "cycles": m.cycles, "macs": m.macs, "utilization": util,
                "dma_bytes_read": m.dma_bytes_read, "dma_bytes_written": m.dma_bytes_written,
                "dma_cycles": m.dma_cycles, "register_writes": m.register_writes,
                "instructions": m.instructions,
            }
        return {
            "pe_count": self.pe_count,
            "kinds": {k.value: row(m, self.utilization(k)) for k, m in self.kinds.items()},
            "totals": row(self.total, self.utilization()),
            "cpu_fallback_node_count": self.cpu_fallback_node_count,
        }


# --------------------------------------------------------------------------
# Device
# --------------------------------------------------------------------------


class DeviceState:
    """SRAM, register file and system memory of one simulated device.

    System memory holds one byte buffer per tensor name plus the weight blob.
    A dtype tag per byte tracks what was last stored where, so opcodes can
    reject operands of the wrong width.
    """

    def __init__(self, sram_bytes: int, weights: bytes = b"", weight_tags=None):
        self.sram = np.zeros(sram_bytes, dtype=np.uint8)
        self.tags = np.zeros(sram_bytes, dtype=np.uint8)
        self.regs: Dict[int, int] = {}
        self.sysmem: Dict[str, np.ndarray] = {}
        self.systags: Dict[str, int] = {}
        self.weights = np.frombuffer(weights, dtype=np.uint8)
        self.weight_tags = (np.full(len(weights), TAG_I8, np.uint8) if weight_tags is None
                            else weight_tags)

    def store(self, value: TensorValue):
        self.sysmem[value.desc.name] = np.frombuffer(value.to_bytes(), np.uint8).copy()
        self.systags[value.desc.name] = TAG_I32 if value.desc.dtype is DType.I32 else TAG_I8

    def load(self, desc) -> TensorValue:
        if desc.name not in self.sysmem:
            raise StreamError(f"tensor {desc.name!r} was never written to system memory")
        return TensorValue.from_bytes(desc, self.sysmem[desc.name])

    def allocate(self, desc):
        if desc.name not in self.sysmem:
            self.sysmem[desc.name] = np.zeros(desc.nbytes, np.uint8)
            self.systags[desc.name] = TAG_I32 if desc.dtype is DType.I32 else TAG_I8

    # SRAM helpers -------------------------------------------------------------

    def read(self, addr: int, count: int, dtype: DType, role: str) -> np.ndarray:
        size = count * dtype.itemsize
        want = TAG_I32 if dtype is DType.I32 else TAG_I8
        tags = self.tags[addr:addr + size]
        if size and not np.all(tags == want):
            raise StreamError(f"{role} operand at SRAM {addr} is not {dtype.value} data")
        return np.frombuffer(self.sram[addr:addr + size].tobytes(), dtype.numpy)

    def write(self, addr: int, values: np.ndarray, dtype: DType):
        raw = np.ascontiguousarray(values, dtype=dtype.numpy).view(np.uint8).ravel()
        self.sram[addr:addr + raw.size] = raw
        self.tags[addr:addr + raw.size] = TAG_I32 if dtype is DType.I32 else TAG_I8


# --------------------------------------------------------------------------
# Execution
# --------------------------------------------------------------------------


def _functional(op: Op, regs: Dict[int, int], dev: DeviceState, buffers: Sequence[str]):
    r = regs.get
    if op in DMA_OPS:
        rows, row_bytes, stride = r(Reg.DMA_ROWS), r(Reg.DMA_ROW_BYTES), r(Reg.DMA_SYS_STRIDE)
        off, sram_addr, buf_id = r(Reg.DMA_SYS_OFFSET), r(Reg.DMA_SRAM_ADDR), r(Reg.DMA_BUF)
        if buf_id == WEIGHT_BUFFER:
            if op is Op.DMA_WRITE:
                raise StreamError("DMA write into the weight blob")
            sysbuf, systag = dev.weights, dev.weight_tags
        else:
            name = buffers[buf_id - 1]
            if op is Op.DMA_READ and name not in dev.sysmem:
                raise StreamError(f"DMA read of unwritten tensor {name!r}")
            sysbuf = dev.sysmem[name]
            systag = None
        span = (rows - 1) * stride + row_bytes if rows else 0
        if off + span > sysbuf.size:
            raise StreamError(f"DMA range [{off}, {off + span}) outside system buffer of "
                              f"{sysbuf.size} bytes")
        idx = (off + np.arange(rows)[:, None] * stride + np.arange(row_bytes)[None, :]).ravel()
        sl = slice(sram_addr, sram_addr + rows * row_bytes)
        if op is Op.DMA_READ:
            dev.sram[sl] = sysbuf[idx]
            dev.tags[sl] = systag[idx] if systag is not None else dev.systags[name]
        else:
            want = dev.systags[name]
            if not np.all(dev.tags[sl] == want):
                raise StreamError(f"DMA write of mismatched data into {name!r}")
            sysbuf[idx] = dev.sram[sl]
        return

    i8, i32 = DType.I8, DType.I32
    if op is Op.MAT_MUL:
        cin, ct = r(Reg.IFM_C), r(Reg.OFM_C)
        x = dev.read(r(Reg.IFM_ADDR), cin, i8, "ifm")
        w = dev.read(r(Reg.WEIGHT_ADDR), cin * ct, i8, "weights").reshape(ct, cin)
        b = dev.read(r(Reg.BIAS_ADDR), ct, i32, "bias")
        dev.write(r(Reg.OFM_ADDR), kernels.dense_acc(x, w, b), i32)
        return
    if op in CONV_OPS:
        h, w_, cin = r(Reg.IFM_H), r(Reg.IFM_W), r(Reg.IFM_C)
        ho, wo, ct = r(Reg.OFM_H), r(Reg.OFM_W), r(Reg.OFM_C)
        kh, kw, stride = r(Reg.KERNEL_H), r(Reg.KERNEL_W), r(Reg.STRIDE)
        pads = (r(Reg.PAD_TOP), r(Reg.PAD_BOTTOM), r(Reg.PAD_LEFT), r(Reg.PAD_RIGHT))
        x = dev.read(r(Reg.IFM_ADDR), h * w_ * cin, i8, "ifm").reshape(h, w_, cin)
        b = dev.read(r(Reg.BIAS_ADDR), ct, i32, "bias")
        if op is Op.DEPTH_CONV:
            wt = dev.read(r(Reg.WEIGHT_ADDR), ct * kh * kw, i8, "weights").reshape(ct, kh, kw)
            acc = kernels.depthwise_acc(x, wt, b, stride, pads)
        else:
            wt = dev.read(r(Reg.WEIGHT_ADDR), ct * kh * kw * cin, i8, "weights")
            acc = kernels.conv2d_acc(x, wt.reshape(ct, kh, kw, cin), b, stride, pads)
        if acc.shape != (ho, wo, ct):
            raise StreamError(f"{op.value}: OFM registers {ho}x{wo}x{ct} disagree with geometry")
        rq = (r(Reg.REQUANT_MULT), r(Reg.REQUANT_SHIFT)) if r(Reg.REQUANT_EN) else None
        out = kernels.finish_conv(acc, rq, op is Op.CONV_RELU)
        dev.write(r(Reg.OFM_ADDR), out, i8 if rq else i32)
        return
    if op is Op.POOL:
        h, w_ = r(Reg.IFM_H), r(Reg.IFM_W)
        ho, wo, ct, k, stride = r(Reg.OFM_H), r(Reg.OFM_W), r(Reg.OFM_C), r(Reg.KERNEL_H), r(Reg.STRIDE)
        x = dev.read(r(Reg.IFM_ADDR), h * w_ * ct, i8, "ifm").reshape(h, w_, ct)
        if r(Reg.POOL_MODE) == POOL_AVG:
            out = kernels.avg_pool(x, k, stride, r(Reg.POOL_MULT), r(Reg.POOL_SHIFT))
        else:
            out = kernels.max_pool(x, k, stride)
        if out.shape != (ho, wo, ct):
            raise StreamError("OP_POOL: OFM registers disagree with pooling geometry")
        dev.write(r(Reg.OFM_ADDR), out, i8)
        return

    n = r(Reg.OFM_H) * r(Reg.OFM_W) * r(Reg.OFM_C)
    if op is Op.REQUANT:
        in_dt = i32 if r(Reg.IN_DTYPE) == DTYPE_I32 else i8
        x = dev.read(r(Reg.IFM_ADDR), n, in_dt, "ifm")
        out = kernels.requantize(x, r(Reg.REQUANT_MULT), r(Reg.REQUANT_SHIFT),
                                 to_i32(r(Reg.CLAMP_LO)), to_i32(r(Reg.CLAMP_HI)))
        dev.write(r(Reg.OFM_ADDR), out, i8)
        return
    if op is Op.E32_ADD:
        a = dev.read(r(Reg.IFM_ADDR), n, i32, "ifm").astype(np.int64)
        b = dev.read(r(Reg.IFM2_ADDR), n, i32, "ifm2")
        dev.write(r(Reg.OFM_ADDR), kernels.wrap_i32(a + b), i32)
        return
    a = dev.read(r(Reg.IFM_ADDR), n, i8, "ifm")
    if op is Op.ACT_RELU:
        out = np.maximum(a, 0)
    elif op is Op.ACT_LRELU:
        out = kernels.leaky_relu(a, r(Reg.ACT_MULT), r(Reg.ACT_SHIFT))
    elif op is Op.E_ABS:
        out = kernels.saturate_i8(np.abs(a.astype(np.int64)))
    else:
        b = dev.read(r(Reg.IFM2_ADDR), n, i8, "ifm2")
        if op is Op.E_ADD:
            out = kernels.saturate_i8(a.astype(np.int64) + b)
        elif op is Op.C_MIN:
            out = np.minimum(a, b)
        elif op is Op.C_MAX:
            out = np.maximum(a, b)
        else:  # pragma: no cover
            raise StreamError(f"no semantics for {op.value}")
    dev.write(r(Reg.OFM_ADDR), out, i8)


def execute_stream(stream: CommandStream, state: Optional[DeviceState] = None,
                   functional: bool = True) -> Tuple[Optional[DeviceState], Metrics]:
    """Run a stream; with ``functional=False`` only the cost model is evaluated."""
    variant = stream.variant
    metrics = Metrics(variant.pe_count)
    km = metrics[stream.kind]
    regs: Dict[int, int] = state.regs if state is not None else {}
    if functional and state is None:
        raise ValueError("functional execution needs a DeviceState")
    m = variant.sram_bytes
    for i, unit in enumerate(stream.units):
        regs.update(unit.regs)
        km.register_writes += len(unit.regs)
        km.instructions += 1
        for reg in registers_read(unit.op, regs):
            if int(reg) not in regs:
                raise StreamError(f"unit {i} ({unit.op.value}) reads register {reg.name} "
                                  "before any write")
        for role, start, length in sram_ranges(unit.op, regs):
            if start < 0 or start + length > m:
                raise StreamError(f"unit {i} ({unit.op.value}) {role} range out of SRAM")
        if unit.op in DMA_OPS:
            nbytes = regs[Reg.DMA_ROWS] * regs[Reg.DMA_ROW_BYTES]
            if unit.op is Op.DMA_READ:
                km.dma_bytes_read += nbytes
            else:
                km.dma_bytes_written += nbytes
            km.dma_cycles += dma_cycles(nbytes, variant)
        else:
            cycles, macs = cycle_cost(unit.op, regs, variant)
            km.cycles += cycles
            km.macs += macs
        if functional:
            try:
                _functional(unit.op, regs, state, stream.buffers)
            except StreamError as exc:
                raise StreamError(f"unit {i} ({unit.op.value}): {exc}") from None
    return state, metrics


# --------------------------------------------------------------------------
# End to end
# --------------------------------------------------------------------------


def weight_tags(graph: Graph) -> np.ndarray:
    tags = np.full(len(graph.weights), TAG_NONE, np.uint8)
    for node in graph.nodes:
        if node.op.has_weights:
            kshape = node.op.kernel_shape(graph.tensors[node.inputs[0]])
            kbytes = math.prod(kshape)
            start = node.weight.offset
            tags[start:start + kbytes] = TAG_I8
            tags[start + kbytes:start + kbytes + 4 * kshape[0]] = TAG_I32
    return tags


def build_artifacts(graph: Graph, pg: PartitionedGraph) -> Dict[int, SubgraphArtifact]:
    return {sg.id: emit_subgraph_artifact(sg, graph) for sg in pg.subgraphs}


def generate_streams(artifacts: Dict[int, SubgraphArtifact], variant: IsaVariant,
                     dedup: bool = True) -> Dict[int, CommandStream]:
    return {i: generate_command_stream(a, variant, dedup) for i, a in artifacts.items()}


def run_end_to_end(graph: Graph, pg: PartitionedGraph, variant: IsaVariant, inputs=None,
                   artifacts: Optional[Dict[int, SubgraphArtifact]] = None,
                   streams: Optional[Dict[int, CommandStream]] = None,
                   functional: bool = True, dedup: bool = True):
    """Execute the partition schedule; returns (outputs, metrics, device).

    Accelerator subgraphs run on the simulator, CPU-fallback nodes on the
    reference interpreter; every tensor crossing a unit boundary lives in
    system memory. With ``functional=False`` only metrics are produced and
    ``outputs`` is None.
    """
    if artifacts is None:
        artifacts = build_artifacts(graph, pg)
    if streams is None:
        streams = generate_streams(artifacts, variant, dedup)
    metrics = Metrics(variant.pe_count, cpu_fallback_node_count=len(pg.cpu_nodes))
    dev = None
    if functional:
        dev = DeviceState(variant.sram_bytes, graph.weights, weight_tags(graph))
        for value in bind_inputs(graph, inputs).values():
            dev.store(value)
        for desc in graph.tensors.values():
            dev.allocate(desc)
    for kind, ref in pg.schedule:
        if kind == "cpu":
            if functional:
                node = graph.node(ref)
                env = {t: dev.load(graph.tensors[t]) for t in node.inputs}
                dev.store(eval_graph_node(graph, node, env))
            continue
        _, m = execute_stream(streams[ref], dev, functional)
        metrics.merge(m)
    outputs = [dev.load(graph.tensors[name]) for name in graph.outputs] if functional else None
    return outputs, metrics, dev


def estimate_metrics(graph: Graph, pg: PartitionedGraph, variant: IsaVariant,
                     artifacts=None, dedup: bool = True) -> Metrics:
    """Cost-model-only run (no data movement)."""
    return run_end_to_end(graph, pg, variant, artifacts=artifacts, functional=False,
                          dedup=dedup)[1]

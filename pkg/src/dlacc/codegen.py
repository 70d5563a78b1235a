"""Load-time command stream generation for a concrete ISA variant.

A subgraph is lowered in one of two ways:

resident
    Every tensor the subgraph touches, plus all weights, fits in SRAM at
    once. Boundary inputs are read once, intermediates never leave SRAM and
    only boundary outputs are written back.
op-by-op
    Each op reads its operands from system memory and writes its result
    back, tiled along output channels by the planner. Used for single-op
    subgraphs, regions that do not fit, and regions holding an emulated
    depthwise convolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .artifact import OpDesc, SubgraphArtifact
from .errors import StreamError, UnsupportedOpcode
from .graph import (
    AvgPool, Conv2D, Dense, DepthwiseConv2D, DType, EwAbs, EwAdd, EwAdd32, EwMax, EwMin,
    LeakyRelu, MaxPool, Relu, Requantize, conv_geometry,
)
from .isa import (
    DMA_OPS, DTYPE_I8, DTYPE_I32, POOL_AVG, POOL_MAX, WEIGHT_BUFFER, IsaVariant, Op, Reg,
    registers_read, sram_ranges, to_u32,
)
from .partition import DwMode, SubgraphKind
from .planner import TilingPlan, plan_tiles


@dataclass(frozen=True)
class Unit:
    op: Op
    regs: Tuple[Tuple[int, int], ...]


@dataclass(frozen=True)
class CommandStream:
    subgraph: int
    kind: SubgraphKind
    variant: IsaVariant
    buffers: Tuple[str, ...]
    units: Tuple[Unit, ...]

    @property
    def register_writes(self) -> int:
        return sum(len(u.regs) for u in self.units)

    def count(self, op: Op) -> int:
        return sum(1 for u in self.units if u.op is op)

    def to_dict(self) -> dict:
        return {
            "subgraph": self.subgraph,
            "kind": self.kind.value,
            "variant": self.variant.to_dict(),
            "buffers": list(self.buffers),
            "units": [{"regs": [[r, v] for r, v in u.regs], "op": u.op.value} for u in self.units],
        }

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), separators=(",", ":")) + "\n").encode()

    @classmethod
    def from_dict(cls, d: dict) -> "CommandStream":
        return cls(
            int(d["subgraph"]),
            SubgraphKind(d["kind"]),
            IsaVariant.from_dict(d["variant"]),
            tuple(d["buffers"]),
            tuple(Unit(Op(u["op"]), tuple((int(r), int(v)) for r, v in u["regs"]))
                  for u in d["units"]),
        )


class _Emitter:
    def __init__(self, dedup: bool):
        self.dedup = dedup
        self.shadow: Dict[int, int] = {}
        self.units: List[Unit] = []

    def emit(self, op: Op, regs: Dict[Reg, int]):
        writes = []
        for reg in sorted(regs):
            value = to_u32(int(regs[reg]))
            if not self.dedup or self.shadow.get(int(reg)) != value:
                writes.append((int(reg), value))
                self.shadow[int(reg)] = value
        self.units.append(Unit(op, tuple(writes)))

    def dma(self, op: Op, buf: int, sys_offset: int, sram: int, rows: int, row_bytes: int,
            stride: Optional[int] = None):
        self.emit(op, {
            Reg.DMA_BUF: buf,
            Reg.DMA_SYS_OFFSET: sys_offset,
            Reg.DMA_SRAM_ADDR: sram,
            Reg.DMA_ROWS: rows,
            Reg.DMA_ROW_BYTES: row_bytes,
            Reg.DMA_SYS_STRIDE: row_bytes if stride is None else stride,
        })


def _opcode(desc: OpDesc, variant: IsaVariant) -> Op:
    k = desc.op
    if isinstance(k, Conv2D):
        return Op.CONV_RELU if k.fuse_relu else Op.CONV
    if isinstance(k, DepthwiseConv2D):
        if variant.dw_mode is DwMode.NATIVE:
            return Op.DEPTH_CONV
        if variant.dw_mode is DwMode.EMULATED:
            return Op.CONV
        raise UnsupportedOpcode(
            f"op {desc.node}: depthwise convolution needs dw_mode emulated or native, "
            f"variant has {variant.dw_mode.value}"
        )
    if isinstance(k, Dense):
        return Op.MAT_MUL if k.requant is None else Op.CONV
    return {
        Requantize: Op.REQUANT, Relu: Op.ACT_RELU, LeakyRelu: Op.ACT_LRELU, MaxPool: Op.POOL,
        AvgPool: Op.POOL, EwAdd: Op.E_ADD, EwAdd32: Op.E32_ADD, EwAbs: Op.E_ABS,
        EwMin: Op.C_MIN, EwMax: Op.C_MAX,
    }[type(k)]


def _compute_regs(desc: OpDesc, opcode: Op, ct: int, ifm: int, ofm: int, ifm2: int = 0,
                  weights: int = 0, bias: int = 0) -> Dict[Reg, int]:
    """Registers for one compute instruction over a tile of ``ct`` output channels."""
    k = desc.op
    _, h, w, cin = desc.inputs[0].shape
    _, ho, wo, _ = desc.output.shape
    if opcode is Op.MAT_MUL:
        return {Reg.IFM_ADDR: ifm, Reg.IFM_C: desc.inputs[0].size, Reg.OFM_ADDR: ofm,
                Reg.OFM_C: ct, Reg.WEIGHT_ADDR: weights, Reg.BIAS_ADDR: bias}
    if isinstance(k, (Conv2D, DepthwiseConv2D, Dense)):
        if isinstance(k, Dense):
            h = w = 1
            cin = desc.inputs[0].size
            kh = kw = stride = 1
            pads = (0, 0, 0, 0)
        else:
            kh, kw, stride = k.kernel_h, k.kernel_w, k.stride
            pads = conv_geometry(h, w, kh, kw, stride, k.pad)[2]
        if isinstance(k, DepthwiseConv2D):
            cin = ct
        regs = {
            Reg.IFM_ADDR: ifm, Reg.IFM_H: h, Reg.IFM_W: w, Reg.IFM_C: cin,
            Reg.OFM_ADDR: ofm, Reg.OFM_H: ho, Reg.OFM_W: wo, Reg.OFM_C: ct,
            Reg.KERNEL_H: kh, Reg.KERNEL_W: kw, Reg.STRIDE: stride,
            Reg.PAD_TOP: pads[0], Reg.PAD_BOTTOM: pads[1], Reg.PAD_LEFT: pads[2],
            Reg.PAD_RIGHT: pads[3], Reg.WEIGHT_ADDR: weights, Reg.BIAS_ADDR: bias,
            Reg.REQUANT_EN: int(k.requant is not None),
        }
        if k.requant is not None:
            regs[Reg.REQUANT_MULT] = k.requant.multiplier
            regs[Reg.REQUANT_SHIFT] = k.requant.shift
        return regs
    if isinstance(k, (MaxPool, AvgPool)):
        regs = {Reg.IFM_ADDR: ifm, Reg.IFM_H: h, Reg.IFM_W: w, Reg.OFM_ADDR: ofm,
                Reg.OFM_H: ho, Reg.OFM_W: wo, Reg.OFM_C: ct, Reg.KERNEL_H: k.k,
                Reg.STRIDE: k.stride, Reg.POOL_MODE: POOL_AVG if isinstance(k, AvgPool) else POOL_MAX}
        if isinstance(k, AvgPool):
            regs[Reg.POOL_MULT] = k.multiplier
            regs[Reg.POOL_SHIFT] = k.shift
        return regs
    regs = {Reg.IFM_ADDR: ifm, Reg.OFM_ADDR: ofm, Reg.OFM_H: ho, Reg.OFM_W: wo, Reg.OFM_C: ct}
    if desc.op.arity == 2:
        regs[Reg.IFM2_ADDR] = ifm2
    if isinstance(k, Requantize):
        regs.update({
            Reg.IN_DTYPE: DTYPE_I32 if desc.inputs[0].dtype is DType.I32 else DTYPE_I8,
            Reg.REQUANT_MULT: k.multiplier, Reg.REQUANT_SHIFT: k.shift,
            Reg.CLAMP_LO: k.clamp_lo, Reg.CLAMP_HI: k.clamp_hi,
        })
    elif isinstance(k, LeakyRelu):
        regs[Reg.ACT_MULT] = k.multiplier
        regs[Reg.ACT_SHIFT] = k.shift
    return regs


def _weight_slices(desc: OpDesc, c0: int, ct: int):
    """(kernel offset, kernel bytes, bias offset, bias bytes) in the blob for a channel run."""
    per_channel = desc.kernel_bytes // desc.kernel_shape[0]
    base = desc.weight.offset
    return (base + c0 * per_channel, ct * per_channel,
            base + desc.kernel_bytes + 4 * c0, 4 * ct)


class _Lowering:
    def __init__(self, artifact: SubgraphArtifact, variant: IsaVariant, dedup: bool):
        self.art = artifact
        self.variant = variant
        self.em = _Emitter(dedup)
        self.buf = {name: i + 1 for i, name in enumerate(artifact.buffers)}

    # -- op-by-op -----------------------------------------------------------

    def op_by_op(self, desc: OpDesc, plan: TilingPlan):
        em, k = self.em, desc.op
        opcode = _opcode(desc, self.variant)
        out = desc.output
        ob = out.dtype.itemsize
        _, ho, wo, cout = out.shape
        tmax = plan.max_tile
        full_input = isinstance(k, (Conv2D, Dense))

        addr = 0
        in_addrs = []
        for t in desc.inputs:
            in_addrs.append(addr)
            if full_input:
                addr += t.nbytes
            else:
                addr += t.shape[1] * t.shape[2] * tmax * t.dtype.itemsize
        w_addr = b_addr = 0
        if k.has_weights:
            per_channel = desc.kernel_bytes // desc.kernel_shape[0]
            w_addr = addr
            addr += per_channel * tmax
            b_addr = addr
            addr += 4 * tmax
        o_addr = addr

        if full_input:
            t = desc.inputs[0]
            em.dma(Op.DMA_READ, self.buf[t.name], 0, in_addrs[0], 1, t.nbytes)
        for c0, ct in plan.offsets():
            if not full_input:
                for t, a in zip(desc.inputs, in_addrs):
                    eb = t.dtype.itemsize
                    em.dma(Op.DMA_READ, self.buf[t.name], c0 * eb, a,
                           t.shape[1] * t.shape[2], ct * eb, t.shape[3] * eb)
            if k.has_weights:
                k_off, k_len, b_off, b_len = _weight_slices(desc, c0, ct)
                em.dma(Op.DMA_READ, WEIGHT_BUFFER, k_off, w_addr, 1, k_len)
                em.dma(Op.DMA_READ, WEIGHT_BUFFER, b_off, b_addr, 1, b_len)
            regs = _compute_regs(desc, opcode, ct, in_addrs[0], o_addr,
                                 in_addrs[1] if len(in_addrs) > 1 else 0, w_addr, b_addr)
            em.emit(opcode, regs)
            em.dma(Op.DMA_WRITE, self.buf[out.name], c0 * ob, o_addr, ho * wo, ct * ob, cout * ob)

    # -- resident -------------------------------------------------------------

    def resident_layout(self) -> Optional[Dict[str, int]]:
        """SRAM address per tensor and per op's weights, or None if it does not fit."""
        addr = 0
        layout: Dict[str, int] = {}
        for name in self.art.inputs:
            layout[name] = addr
            addr += self.art.tensors[name].nbytes
        for desc in self.art.ops:
            if desc.op.has_weights:
                layout["w:" + desc.node] = addr
                addr += desc.kernel_bytes
                layout["b:" + desc.node] = addr
                addr += 4 * desc.kernel_shape[0]
            layout[desc.output.name] = addr
            addr += desc.output.nbytes
        return layout if addr <= self.variant.sram_bytes else None

    def resident(self, layout: Dict[str, int]):
        em = self.em
        for name in self.art.inputs:
            t = self.art.tensors[name]
            em.dma(Op.DMA_READ, self.buf[name], 0, layout[name], 1, t.nbytes)
        for desc in self.art.ops:
            opcode = _opcode(desc, self.variant)
            out = desc.output
            cout = out.shape[3]
            w_addr = layout.get("w:" + desc.node, 0)
            b_addr = layout.get("b:" + desc.node, 0)
            if desc.op.has_weights:
                k_off, k_len, b_off, b_len = _weight_slices(desc, 0, cout)
                em.dma(Op.DMA_READ, WEIGHT_BUFFER, k_off, w_addr, 1, k_len)
                em.dma(Op.DMA_READ, WEIGHT_BUFFER, b_off, b_addr, 1, b_len)
            ins = [layout[t.name] for t in desc.inputs]
            em.emit(opcode, _compute_regs(desc, opcode, cout, ins[0], layout[out.name],
                                          ins[1] if len(ins) > 1 else 0, w_addr, b_addr))
            if out.name in self.art.outputs:
                em.dma(Op.DMA_WRITE, self.buf[out.name], 0, layout[out.name], 1, out.nbytes)

    # -- entry ----------------------------------------------------------------

    def lower(self) -> Tuple[Unit, ...]:
        # an emulated depthwise needs each channel as its own contiguous plane,
        # which only the per-channel DMA gather of the op-by-op path provides
        emulated_dw = self.variant.dw_mode is DwMode.EMULATED and any(
            isinstance(d.op, DepthwiseConv2D) for d in self.art.ops)
        plans = [plan_tiles(d, self.variant) for d in self.art.ops]
        for d in self.art.ops:
            _opcode(d, self.variant)  # reject unsupported ops before emitting anything
        layout = None
        if len(self.art.ops) > 1 and not emulated_dw:
            layout = self.resident_layout()
        if layout is not None:
            self.resident(layout)
        else:
            for d, plan in zip(self.art.ops, plans):
                self.op_by_op(d, plan)
        return tuple(self.em.units)


def generate_command_stream(artifact: SubgraphArtifact, variant: IsaVariant,
                            dedup: bool = True) -> CommandStream:
    """Plan every op and emit the register-write/opcode stream for ``variant``.

    Raises InsufficientSram if an op cannot be tiled into SRAM and
    UnsupportedOpcode if the variant lacks an instruction the subgraph needs.
    """
    units = _Lowering(artifact, variant, dedup).lower()
    stream = CommandStream(artifact.id, artifact.kind, variant, artifact.buffers, units)
    validate_stream(stream)
    return stream


def validate_stream(stream: CommandStream) -> bool:
    """Static check: registers written before read, SRAM ranges inside [0, M)."""
    regs: Dict[int, int] = {}
    m = stream.variant.sram_bytes
    for i, unit in enumerate(stream.units):
        regs.update(unit.regs)
        missing = [r.name for r in registers_read(unit.op, regs) if int(r) not in regs]
        if missing:
            raise StreamError(f"unit {i} ({unit.op.value}) reads unwritten registers {missing}")
        for role, start, length in sram_ranges(unit.op, regs):
            if start < 0 or start + length > m:
                raise StreamError(
                    f"unit {i} ({unit.op.value}) {role} range [{start}, {start + length}) "
                    f"outside SRAM of {m} bytes"
                )
        if unit.op in DMA_OPS and regs[Reg.DMA_BUF] > len(stream.buffers):
            raise StreamError(f"unit {i}: unknown DMA buffer {regs[Reg.DMA_BUF]}")
    return True

"""Accelerator ISA: opcodes, register file layout and hardware variants.

Register ids are part of the stream file format and must never be renumbered;
add new registers at unused ids only.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from enum import Enum, IntEnum
from typing import Dict, List, Tuple

from .partition import DwMode


class Op(str, Enum):
    CONV = "OP_CONV"
    CONV_RELU = "OP_CONV_RELU"
    DEPTH_CONV = "OP_DEPTH_CONV"
    MAT_MUL = "OP_MAT_MUL"
    ACT_RELU = "OP_ACT_RELU"
    ACT_LRELU = "OP_ACT_LRELU"
    POOL = "OP_POOL"
    E_ABS = "OP_E_ABS"
    C_MIN = "OP_C_MIN"
    C_MAX = "OP_C_MAX"
    E_ADD = "OP_E_ADD"
    E32_ADD = "OP_E32_ADD"
    DMA_READ = "OP_DMA_READ"
    DMA_WRITE = "OP_DMA_WRITE"
    # standalone requantization unit (not in the base instruction table)
    REQUANT = "REQUANT"


class Reg(IntEnum):
    IFM_ADDR = 0x00
    IFM2_ADDR = 0x01
    IFM_H = 0x02
    IFM_W = 0x03
    IFM_C = 0x04
    OFM_ADDR = 0x05
    OFM_H = 0x06
    OFM_W = 0x07
    OFM_C = 0x08
    KERNEL_H = 0x09
    KERNEL_W = 0x0A
    STRIDE = 0x0B
    PAD_TOP = 0x0C
    PAD_BOTTOM = 0x0D
    PAD_LEFT = 0x0E
    PAD_RIGHT = 0x0F
    WEIGHT_ADDR = 0x10
    BIAS_ADDR = 0x11
    REQUANT_EN = 0x12
    REQUANT_MULT = 0x13
    REQUANT_SHIFT = 0x14
    CLAMP_LO = 0x15
    CLAMP_HI = 0x16
    ACT_MULT = 0x17
    ACT_SHIFT = 0x18
    POOL_MODE = 0x19
    POOL_MULT = 0x1A
    POOL_SHIFT = 0x1B
    IN_DTYPE = 0x1C
    DMA_BUF = 0x20
    DMA_SYS_OFFSET = 0x21
    DMA_SRAM_ADDR = 0x22
    DMA_ROWS = 0x23
    DMA_ROW_BYTES = 0x24
    DMA_SYS_STRIDE = 0x25


class ParallelMode(str, Enum):
    INPUT = "input"
    OUTPUT = "output"


POOL_MAX, POOL_AVG = 0, 1
DTYPE_I8, DTYPE_I32 = 0, 1
WEIGHT_BUFFER = 0  # DMA_BUF id of the shared weight blob

_CONV_GEOMETRY = (Reg.IFM_ADDR, Reg.IFM_H, Reg.IFM_W, Reg.IFM_C, Reg.OFM_ADDR, Reg.OFM_H,
                  Reg.OFM_W, Reg.OFM_C, Reg.KERNEL_H, Reg.KERNEL_W, Reg.STRIDE, Reg.PAD_TOP,
                  Reg.PAD_BOTTOM, Reg.PAD_LEFT, Reg.PAD_RIGHT, Reg.WEIGHT_ADDR, Reg.BIAS_ADDR,
                  Reg.REQUANT_EN)
_REQUANT_PARAMS = (Reg.REQUANT_MULT, Reg.REQUANT_SHIFT)
_EW = (Reg.IFM_ADDR, Reg.OFM_ADDR, Reg.OFM_H, Reg.OFM_W, Reg.OFM_C)
_DMA = (Reg.DMA_BUF, Reg.DMA_SYS_OFFSET, Reg.DMA_SRAM_ADDR, Reg.DMA_ROWS, Reg.DMA_ROW_BYTES,
        Reg.DMA_SYS_STRIDE)

_BASE_READS = {
    Op.CONV: _CONV_GEOMETRY,
    Op.CONV_RELU: _CONV_GEOMETRY,
    Op.DEPTH_CONV: _CONV_GEOMETRY,
    Op.MAT_MUL: (Reg.IFM_ADDR, Reg.IFM_C, Reg.OFM_ADDR, Reg.OFM_C, Reg.WEIGHT_ADDR,
                 Reg.BIAS_ADDR),
    Op.ACT_RELU: _EW,
    Op.ACT_LRELU: _EW + (Reg.ACT_MULT, Reg.ACT_SHIFT),
    Op.POOL: (Reg.IFM_ADDR, Reg.IFM_H, Reg.IFM_W, Reg.OFM_ADDR, Reg.OFM_H, Reg.OFM_W, Reg.OFM_C,
              Reg.KERNEL_H, Reg.STRIDE, Reg.POOL_MODE),
    Op.E_ABS: _EW,
    Op.C_MIN: _EW + (Reg.IFM2_ADDR,),
    Op.C_MAX: _EW + (Reg.IFM2_ADDR,),
    Op.E_ADD: _EW + (Reg.IFM2_ADDR,),
    Op.E32_ADD: _EW + (Reg.IFM2_ADDR,),
    Op.REQUANT: _EW + (Reg.IN_DTYPE, Reg.REQUANT_MULT, Reg.REQUANT_SHIFT, Reg.CLAMP_LO,
                       Reg.CLAMP_HI),
    Op.DMA_READ: _DMA,
    Op.DMA_WRITE: _DMA,
}

DMA_OPS = (Op.DMA_READ, Op.DMA_WRITE)
CONV_OPS = (Op.CONV, Op.CONV_RELU, Op.DEPTH_CONV)


def registers_read(op: Op, regs: Dict[int, int]) -> Tuple[Reg, ...]:
    """Registers an opcode reads given the current register state."""
    reads = _BASE_READS[op]
    if op in CONV_OPS and regs.get(Reg.REQUANT_EN):
        reads = reads + _REQUANT_PARAMS
    if op is Op.POOL and regs.get(Reg.POOL_MODE) == POOL_AVG:
        reads = reads + (Reg.POOL_MULT, Reg.POOL_SHIFT)
    return reads


def to_u32(value: int) -> int:
    if not -(2**31) <= value < 2**32:
        raise ValueError(f"value {value} does not fit a 32-bit register")
    return value & 0xFFFFFFFF


def to_i32(value: int) -> int:
    return value - 2**32 if value >= 2**31 else value


def sram_ranges(op: Op, regs: Dict[int, int]) -> List[Tuple[str, int, int]]:
    """(role, start, length) of every SRAM range an opcode touches."""
    r = regs.get
    if op in DMA_OPS:
        return [("dma", r(Reg.DMA_SRAM_ADDR), r(Reg.DMA_ROWS) * r(Reg.DMA_ROW_BYTES))]
    if op is Op.MAT_MUL:
        cin, ct = r(Reg.IFM_C), r(Reg.OFM_C)
        return [("ifm", r(Reg.IFM_ADDR), cin), ("weights", r(Reg.WEIGHT_ADDR), cin * ct),
                ("bias", r(Reg.BIAS_ADDR), 4 * ct), ("ofm", r(Reg.OFM_ADDR), 4 * ct)]
    if op in CONV_OPS:
        h, w, cin = r(Reg.IFM_H), r(Reg.IFM_W), r(Reg.IFM_C)
        ho, wo, ct = r(Reg.OFM_H), r(Reg.OFM_W), r(Reg.OFM_C)
        kk = r(Reg.KERNEL_H) * r(Reg.KERNEL_W)
        out_bytes = 1 if r(Reg.REQUANT_EN) else 4
        wbytes = kk * ct if op is Op.DEPTH_CONV else kk * cin * ct
        return [("ifm", r(Reg.IFM_ADDR), h * w * cin), ("weights", r(Reg.WEIGHT_ADDR), wbytes),
                ("bias", r(Reg.BIAS_ADDR), 4 * ct), ("ofm", r(Reg.OFM_ADDR), ho * wo * ct * out_bytes)]
    if op is Op.POOL:
        c = r(Reg.OFM_C)
        return [("ifm", r(Reg.IFM_ADDR), r(Reg.IFM_H) * r(Reg.IFM_W) * c),
                ("ofm", r(Reg.OFM_ADDR), r(Reg.OFM_H) * r(Reg.OFM_W) * c)]
    n = r(Reg.OFM_H) * r(Reg.OFM_W) * r(Reg.OFM_C)
    in_bytes = 4 if op is Op.E32_ADD or (op is Op.REQUANT and r(Reg.IN_DTYPE) == DTYPE_I32) else 1
    out_bytes = 4 if op is Op.E32_ADD else 1
    ranges = [("ifm", r(Reg.IFM_ADDR), n * in_bytes)]
    if Reg.IFM2_ADDR in _BASE_READS[op]:
        ranges.append(("ifm2", r(Reg.IFM2_ADDR), n * in_bytes))
    ranges.append(("ofm", r(Reg.OFM_ADDR), n * out_bytes))
    return ranges


_SIZE_RE = re.compile(r"^\s*(\d+)\s*(B|KIB|MIB|GIB|K|M|G)?\s*$", re.IGNORECASE)
_UNITS = {None: 1, "B": 1, "K": 1024, "KIB": 1024, "M": 1024**2, "MIB": 1024**2,
          "G": 1024**3, "GIB": 1024**3}


def parse_size(text) -> int:
    """'512KiB' -> 524288. Bare integers are bytes."""
    if isinstance(text, int):
        return text
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ValueError(f"bad size {text!r}")
    unit = m.group(2).upper() if m.group(2) else None
    return int(m.group(1)) * _UNITS[unit]


def format_size(n: int) -> str:
    for unit, size in (("GiB", 1024**3), ("MiB", 1024**2), ("KiB", 1024)):
        if n % size == 0 and n >= size:
            return f"{n // size}{unit}"
    return str(n)


@dataclass(frozen=True)
class IsaVariant:
    pe_count: int = 128
    sram_bytes: int = 256 * 1024**2
    parallel_mode: ParallelMode = ParallelMode.OUTPUT
    dw_mode: DwMode = DwMode.NATIVE
    bus_bytes_per_cycle: int = 16
    requant_lane_divisor: int = 16
    requant_setup_cycles: int = 64

    def __post_init__(self):
        object.__setattr__(self, "parallel_mode", ParallelMode(self.parallel_mode))
        object.__setattr__(self, "dw_mode", DwMode(self.dw_mode))
        if not 1 <= self.pe_count <= 4096:
            raise ValueError(f"pe_count {self.pe_count} outside 1..4096")
        if self.sram_bytes < 1024:
            raise ValueError("sram_bytes must be at least 1 KiB")
        if self.sram_bytes > 2**32:
            raise ValueError("sram_bytes must be addressable by 32-bit registers")
        if self.bus_bytes_per_cycle < 1 or self.requant_lane_divisor < 1:
            raise ValueError("bus width and requant lane divisor must be positive")
        if self.requant_setup_cycles < 0:
            raise ValueError("requant_setup_cycles must be non-negative")

    @property
    def label(self) -> str:
        return (f"{format_size(self.sram_bytes)}/{self.pe_count}PE/"
                f"{self.parallel_mode.value[0].upper()}/{self.dw_mode.value}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parallel_mode"] = self.parallel_mode.value
        d["dw_mode"] = self.dw_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IsaVariant":
        return cls(**d)

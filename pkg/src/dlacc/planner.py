"""SRAM tiling along the output-channel dimension.

Footprint of one tile of ``C_t`` output channels:

* Conv2D / Dense: the whole input map stays resident, plus the tile's
  weights, i32 biases and outputs.
* Depthwise, pooling, elementwise, activation and requantize ops only need
  the input channels of their own tile, so their input term scales with
  ``C_t`` as well.

The tile size is the largest ``C_t`` that fits; when the op has to be split
and ``C_t >= P`` it is rounded down to a multiple of ``P`` so that no tile
wastes a partially filled PE pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

from .artifact import OpDesc
from .errors import InsufficientSram
from .graph import AvgPool, Conv2D, Dense, DepthwiseConv2D, MaxPool
from .isa import IsaVariant
from .partition import DwMode


@dataclass(frozen=True)
class TilingPlan:
    node: str
    tiles: Tuple[int, ...]
    fixed_bytes: int  # resident part (full input map for convs), independent of C_t
    per_channel_bytes: int

    @property
    def channels(self) -> int:
        return sum(self.tiles)

    @property
    def max_tile(self) -> int:
        return max(self.tiles)

    def footprint(self, ct: int = None) -> int:
        return self.fixed_bytes + self.per_channel_bytes * (self.max_tile if ct is None else ct)

    def offsets(self):
        """(first channel, channel count) per tile."""
        c0 = 0
        for ct in self.tiles:
            yield c0, ct
            c0 += ct


def footprint_terms(op: OpDesc) -> Tuple[int, int]:
    """(fixed bytes, bytes per output channel) of an op's SRAM working set."""
    kind = op.op
    out = op.output
    ob = out.dtype.itemsize
    _, ho, wo, _ = out.shape
    if isinstance(kind, Conv2D):
        _, h, w, cin = op.inputs[0].shape
        kk = kind.kernel_h * kind.kernel_w
        return h * w * cin, kk * cin + 4 + ob * ho * wo
    if isinstance(kind, Dense):
        fin = op.inputs[0].size
        return fin, fin + 4 + ob
    if isinstance(kind, DepthwiseConv2D):
        _, h, w, _ = op.inputs[0].shape
        kk = kind.kernel_h * kind.kernel_w
        return 0, h * w + kk + 4 + ob * ho * wo
    if isinstance(kind, (MaxPool, AvgPool)):
        _, h, w, _ = op.inputs[0].shape
        return 0, h * w + ho * wo
    plane = ho * wo
    return 0, sum(plane * t.dtype.itemsize for t in op.inputs) + plane * ob


def plan_tiles(op: OpDesc, variant: IsaVariant) -> TilingPlan:
    cout = op.output.shape[3]
    fixed, per = footprint_terms(op)
    m = variant.sram_bytes
    if fixed + per > m:
        raise InsufficientSram(op.node, fixed + per, m)
    if isinstance(op.op, DepthwiseConv2D) and variant.dw_mode is DwMode.EMULATED:
        # lowered to one single-channel conv per channel
        return TilingPlan(op.node, (1,) * cout, fixed, per)
    ct = min((m - fixed) // per, cout)
    p = variant.pe_count
    if ct < cout and ct >= p:
        ct -= ct % p
    tiles = (ct,) * (cout // ct) + ((cout % ct,) if cout % ct else ())
    return TilingPlan(op.node, tiles, fixed, per)

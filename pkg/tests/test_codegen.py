import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlacc.artifact import OpDesc, emit_subgraph_artifact, load_artifact
from dlacc.builder import GraphBuilder
from dlacc.codegen import CommandStream, Unit, generate_command_stream, validate_stream
from dlacc.errors import InsufficientSram, StreamError, UnsupportedOpcode
from dlacc.graph import (
    Conv2D, DepthwiseConv2D, DType, Pad, Relu, Requant, Requantize, TensorDesc,
)
from dlacc.interp import interpret
from dlacc.isa import IsaVariant, Op, Reg, format_size, parse_size
from dlacc.partition import DwMode, partition_graph
from dlacc.planner import footprint_terms, plan_tiles
from dlacc.sim import run_end_to_end

from graphgen import random_graph, random_inputs

KiB, MiB = 1024, 1024**2


def _conv_desc(h, cin, cout, k=1, stride=1, out_dtype=DType.I32):
    ho = wo = -(-h // stride)
    rq = Requant(1, 0) if out_dtype is DType.I8 else None
    op = Conv2D(k, k, stride, Pad.SAME, cout, output_dtype=out_dtype, requant=rq)
    return OpDesc("pw", op, (TensorDesc("x", (1, h, h, cin), DType.I8),),
                  TensorDesc("y", (1, ho, wo, cout), out_dtype))


def test_pointwise_32_64_at_512k():
    desc = _conv_desc(112, 32, 64)
    fixed, per = footprint_terms(desc)
    assert fixed == 401_408
    assert per == 32 + 4 + 4 * 112 * 112
    # exhaustive search for the largest feasible tile
    best = max(c for c in range(1, 65) if fixed + per * c <= 512 * KiB)
    plan = plan_tiles(desc, IsaVariant(128, 512 * KiB))
    assert best == 2 and plan.tiles == (2,) * 32


def test_pointwise_untiled_at_256m():
    assert plan_tiles(_conv_desc(112, 32, 64), IsaVariant(128, 256 * MiB)).tiles == (64,)


def test_pointwise_128_256_rounds_to_p():
    desc = _conv_desc(28, 128, 256)
    fixed, per = footprint_terms(desc)
    assert max(c for c in range(1, 257) if fixed + per * c <= 512 * KiB) == 129
    assert plan_tiles(desc, IsaVariant(128, 512 * KiB)).tiles == (128, 128)


def test_insufficient_sram():
    with pytest.raises(InsufficientSram) as info:
        plan_tiles(_conv_desc(112, 32, 64), IsaVariant(128, 256 * KiB))
    assert info.value.node == "pw"
    assert info.value.required == 401_408 + 50_212


def test_emulated_depthwise_tiles():
    op = DepthwiseConv2D(3, 3, 1, Pad.SAME)
    desc = OpDesc("dw", op, (TensorDesc("x", (1, 8, 8, 5), DType.I8),),
                  TensorDesc("y", (1, 8, 8, 5), DType.I32))
    assert plan_tiles(desc, IsaVariant(dw_mode="emulated")).tiles == (1,) * 5


@settings(max_examples=300, deadline=None)
@given(h=st.integers(1, 64), cin=st.integers(1, 300), cout=st.integers(1, 600),
       k=st.sampled_from([1, 3]), p=st.sampled_from([8, 64, 128]),
       m=st.integers(1 * KiB, 4 * MiB), i8=st.booleans())
def test_tiling_conservation(h, cin, cout, k, p, m, i8):
    desc = _conv_desc(h, cin, cout, k, out_dtype=DType.I8 if i8 else DType.I32)
    try:
        plan = plan_tiles(desc, IsaVariant(p, m))
    except InsufficientSram as exc:
        fixed, per = footprint_terms(desc)
        assert fixed + per > m and exc.required == fixed + per
        return
    assert sum(plan.tiles) == cout
    assert plan.footprint() <= m
    assert all(t == plan.tiles[0] for t in plan.tiles[:-1])
    if len(plan.tiles) > 1 and plan.tiles[0] >= p:
        assert plan.tiles[0] % p == 0


# -- artifacts ---------------------------------------------------------------


def test_artifact_deterministic_and_roundtrips(mobilenet):
    pg = partition_graph(mobilenet)
    for sg in pg.subgraphs[:8]:
        a = emit_subgraph_artifact(sg, mobilenet)
        b = emit_subgraph_artifact(sg, mobilenet)
        assert a.manifest_bytes() == b.manifest_bytes()
        back = load_artifact(a.manifest_bytes(), mobilenet.weights)
        assert back.ops == a.ops and back.tensors == a.tensors and back.kind is a.kind
        assert b"pe_count" not in a.manifest_bytes() and b"sram" not in a.manifest_bytes()


def test_one_artifact_many_variants(mnist):
    pg = partition_graph(mnist)
    art = emit_subgraph_artifact(pg.subgraphs[0], mnist)
    s64 = generate_command_stream(art, IsaVariant(64))
    s128 = generate_command_stream(art, IsaVariant(128))
    assert s64.units == s128.units and s64.variant != s128.variant


# -- command streams ------------------------------------------------------------


def _two_convs():
    b = GraphBuilder()
    x = b.input("x", (1, 6, 6, 4))
    rq = Requant(2**30, 36)
    y = b.add("c1", Conv2D(3, 3, 1, Pad.SAME, 4, output_dtype=DType.I8, requant=rq), [x],
              kernel=np.ones((4, 3, 3, 4)))
    z = b.add("c2", Conv2D(3, 3, 1, Pad.SAME, 4, output_dtype=DType.I8, requant=rq), [y],
              kernel=np.ones((4, 3, 3, 4)))
    return b.build([z])


@pytest.mark.parametrize("sram", [256 * MiB, 1 * KiB])
def test_register_dedup_skips_unchanged(sram):
    g = _two_convs()
    pg = partition_graph(g, barrier_mode=False)
    art = emit_subgraph_artifact(pg.subgraphs[0], g)
    stream = generate_command_stream(art, IsaVariant(128, sram))
    convs = [u for u in stream.units if u.op is Op.CONV]
    assert len(convs) >= 2
    second = {r for r, _ in convs[-1].regs}
    for reg in (Reg.KERNEL_H, Reg.KERNEL_W, Reg.STRIDE, Reg.PAD_TOP, Reg.PAD_BOTTOM,
                Reg.PAD_LEFT, Reg.PAD_RIGHT, Reg.REQUANT_MULT, Reg.REQUANT_SHIFT):
        assert int(reg) not in second
    first = {r for r, _ in convs[0].regs}
    assert int(Reg.KERNEL_H) in first


def _dw8():
    b = GraphBuilder()
    x = b.input("x", (1, 5, 5, 8))
    d = b.add("dw", DepthwiseConv2D(3, 3, 1, Pad.SAME), [x],
              kernel=np.arange(72).reshape(8, 3, 3) % 7 - 3)
    return b.build([b.add("rq", Requantize(1, 2, barrier=True), [d])])


def test_emulated_depthwise_units():
    g = _dw8()
    pg = partition_graph(g, DwMode.EMULATED)
    dw_sg = next(sg for sg in pg.subgraphs if "dw" in sg.nodes)
    art = emit_subgraph_artifact(dw_sg, g)
    stream = generate_command_stream(art, IsaVariant(dw_mode="emulated"))
    assert stream.count(Op.CONV) == 8 and stream.count(Op.DEPTH_CONV) == 0
    native = generate_command_stream(art, IsaVariant(dw_mode="native"))
    assert native.count(Op.DEPTH_CONV) == 1
    with pytest.raises(UnsupportedOpcode, match="dw"):
        generate_command_stream(art, IsaVariant(dw_mode="fallback"))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([1 * KiB, 4 * KiB, 256 * MiB]))
def test_dedup_transparent(seed, sram):
    g = random_graph(seed)
    x = random_inputs(g, seed)
    pg = partition_graph(g, barrier_mode=bool(seed % 2))
    v = IsaVariant(64, sram)
    try:
        on_out, on_m, _ = run_end_to_end(g, pg, v, x, dedup=True)
    except InsufficientSram:
        return
    off_out, off_m, _ = run_end_to_end(g, pg, v, x, dedup=False)
    assert on_m.total.register_writes <= off_m.total.register_writes
    assert on_m.total.cycles == off_m.total.cycles
    for a, b in zip(on_out, off_out):
        assert np.array_equal(a.data, b.data)


def test_streams_validate_and_roundtrip(mobilenet):
    pg = partition_graph(mobilenet)
    for sram in (512 * KiB, 256 * MiB):
        for sg in pg.subgraphs[:6]:
            art = emit_subgraph_artifact(sg, mobilenet)
            s = generate_command_stream(art, IsaVariant(128, sram))
            assert validate_stream(s)
            assert CommandStream.from_dict(json.loads(s.to_json())) == s


def _tiny_stream(units):
    return CommandStream(0, "OTHER", IsaVariant(sram_bytes=1 * KiB), ("a", "b"), tuple(units))


def test_validator_read_before_write():
    with pytest.raises(StreamError, match="unwritten"):
        validate_stream(_tiny_stream([Unit(Op.ACT_RELU, ((int(Reg.IFM_ADDR), 0),))]))


def test_validator_sram_bounds():
    regs = ((int(Reg.DMA_BUF), 1), (int(Reg.DMA_SYS_OFFSET), 0), (int(Reg.DMA_SRAM_ADDR), 1000),
            (int(Reg.DMA_ROWS), 1), (int(Reg.DMA_ROW_BYTES), 100), (int(Reg.DMA_SYS_STRIDE), 100))
    with pytest.raises(StreamError, match="outside SRAM"):
        validate_stream(_tiny_stream([Unit(Op.DMA_READ, regs)]))


def test_register_ids_stable():
    assert (Reg.IFM_ADDR, Reg.OFM_C, Reg.PAD_RIGHT, Reg.WEIGHT_ADDR, Reg.IN_DTYPE, Reg.DMA_BUF,
            Reg.DMA_SYS_STRIDE) == (0x00, 0x08, 0x0F, 0x10, 0x1C, 0x20, 0x25)


def test_sizes():
    assert parse_size("512KiB") == 524_288 and parse_size("1MiB") == 1_048_576
    assert parse_size("256MiB") == 268_435_456 and parse_size("4096") == 4096
    assert format_size(524_288) == "512KiB"
    with pytest.raises(ValueError):
        parse_size("lots")


def test_variant_validation():
    with pytest.raises(ValueError):
        IsaVariant(pe_count=0)
    with pytest.raises(ValueError):
        IsaVariant(sram_bytes=512)
    v = IsaVariant(64, 512 * KiB, "input", "emulated")
    assert IsaVariant.from_dict(v.to_dict()) == v


def test_fused_relu_opcode():
    b = GraphBuilder()
    x = b.input("x", (1, 3, 3, 2))
    y = b.add("c", Conv2D(1, 1, 1, Pad.VALID, 2, True, DType.I8, Requant(1, 0)), [x],
              kernel=np.array([[[[1, -1]]], [[[-1, 1]]]]))
    g = b.build([b.add("r", Relu(), [y])])
    pg = partition_graph(g)
    s = generate_command_stream(emit_subgraph_artifact(pg.subgraphs[0], g), IsaVariant())
    assert s.count(Op.CONV_RELU) == 1 and s.count(Op.ACT_RELU) == 1
    data = np.array([5, 3, -2, 7, 0, 0, 1, 1, -128, 127, 9, -9, 4, 4, 2, 1, 0, 3], np.int8)
    out, _, _ = run_end_to_end(g, pg, IsaVariant(), [data.reshape(1, 3, 3, 2)])
    assert np.array_equal(out[0].data, interpret(g, [data.reshape(1, 3, 3, 2)])[0].data)

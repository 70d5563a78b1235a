"""The two evaluation networks: a small MNIST classifier and MobileNetV1.

Weights are pseudo-random but realistic: float kernels are drawn from a He
initialisation, MobileNet batch norm parameters are folded into them, and
everything is quantized symmetric per tensor. Output scales are picked
analytically from the expected accumulator spread, so no calibration data
is involved.
"""

from __future__ import annotations

import math

import numpy as np

from .builder import GraphBuilder
from .graph import (
    AvgPool, Conv2D, Dense, DepthwiseConv2D, Graph, MaxPool, Pad, Relu, Requantize,
)
from .kernels import quantize_multiplier

MNIST_SEED = 20210
MOBILENET_SEED = 20211

# target std of a requantized (pre-clamp) activation
_ACT_STD = 48.0
# RMS of a uniform i8 input image
_INPUT_RMS = 74.0

# MobileNetV1 (alpha 1.0) depthwise/pointwise blocks: (in, out, depthwise stride)
MOBILENET_BLOCKS = (
    (32, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1), (256, 512, 2),
    (512, 512, 1), (512, 512, 1), (512, 512, 1), (512, 512, 1), (512, 512, 1),
    (512, 1024, 2), (1024, 1024, 1),
)


def _quantize_layer(rng, kshape, fan_in, in_scale, in_rms, batch_norm):
    """Return (i8 kernel, i32 bias, requant multiplier, shift, output scale)."""
    cout = kshape[0]
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), kshape)
    if batch_norm:
        gamma = rng.uniform(0.5, 1.5, cout)
        beta = rng.normal(0.0, 0.1, cout)
        mean = rng.normal(0.0, 0.1, cout)
        var = rng.uniform(0.5, 1.5, cout)
        factor = gamma / np.sqrt(var + 1e-3)
        w = w * factor.reshape((-1,) + (1,) * (len(kshape) - 1))
        b = beta - mean * factor
    else:
        b = rng.normal(0.0, 0.05, cout)
    w_scale = float(np.abs(w).max()) / 127.0
    w_q = np.clip(np.rint(w / w_scale), -127, 127).astype(np.int8)
    acc_scale = in_scale * w_scale
    b_q = np.clip(np.rint(b / acc_scale), -(2**31), 2**31 - 1).astype(np.int32)
    acc_std = math.sqrt(fan_in) * float(w_q.astype(np.float64).std()) * in_rms
    real = _ACT_STD / max(acc_std, 1e-9)
    mult, shift = quantize_multiplier(real)
    out_scale = acc_scale / (mult / 2.0**shift)
    return w_q, b_q, mult, shift, out_scale


def build_mnist_fixture() -> Graph:
    """Conv(1->8) -> Conv(8->16) -> Dense(->10); each followed by a barrier requant."""
    rng = np.random.default_rng(MNIST_SEED)
    g = GraphBuilder("mnist")
    x = g.input("image", (1, 28, 28, 1), scale=1.0 / 127)
    cin, rms = 1, _INPUT_RMS
    for i, cout in enumerate((8, 16), start=1):
        w, b, m, s, out_scale = _quantize_layer(rng, (cout, 3, 3, cin), 9 * cin,
                                                g.tensors[x].scale, rms, batch_norm=False)
        rms = _ACT_STD / math.sqrt(2)
        acc = g.add(f"conv{i}", Conv2D(3, 3, 1, Pad.SAME, cout), [x], kernel=w, bias=b)
        x = g.add(f"conv{i}_rq", Requantize(m, s, barrier=True), [acc], scale=out_scale)
        x = g.add(f"relu{i}", Relu(), [x])
        x = g.add(f"pool{i}", MaxPool(2, 2), [x])
        cin = cout
    fan_in = g.tensors[x].size
    w, b, m, s, out_scale = _quantize_layer(rng, (10, fan_in), fan_in, g.tensors[x].scale,
                                            rms, batch_norm=False)
    acc = g.add("fc", Dense(10), [x], kernel=w, bias=b)
    logits = g.add("fc_rq", Requantize(m, s, barrier=True), [acc], scale=out_scale,
                   output="logits")
    return g.build([logits])


def build_mobilenet_v1_fixture(dw_mode=None) -> Graph:
    """MobileNetV1, width 1.0, 224x224x3 input, 1000 classes.

    Every conv/depthwise/dense layer emits i32 and is followed by a barrier
    requantize whose clamp realises the ReLU. ``dw_mode`` is accepted for
    symmetry with the partitioner and does not change the graph.
    """
    rng = np.random.default_rng(MOBILENET_SEED)
    g = GraphBuilder("mobilenet_v1")
    x = g.input("image", (1, 224, 224, 3), scale=1.0 / 127)

    rms = _INPUT_RMS

    def layer(name, op, kshape, fan_in, relu=True):
        nonlocal x, rms
        w, b, m, s, out_scale = _quantize_layer(rng, kshape, fan_in, g.tensors[x].scale, rms,
                                                batch_norm=relu)
        rms = _ACT_STD / math.sqrt(2)
        acc = g.add(name, op, [x], kernel=w, bias=b)
        lo = 0 if relu else -128
        x = g.add(f"{name}_rq", Requantize(m, s, clamp_lo=lo, barrier=True), [acc],
                  scale=out_scale)

    layer("conv1", Conv2D(3, 3, 2, Pad.SAME, 32), (32, 3, 3, 3), 27)
    for i, (cin, cout, stride) in enumerate(MOBILENET_BLOCKS, start=1):
        layer(f"dw{i}", DepthwiseConv2D(3, 3, stride, Pad.SAME), (cin, 3, 3), 9)
        layer(f"pw{i}", Conv2D(1, 1, 1, Pad.SAME, cout), (cout, 1, 1, cin), cin)
    h = g.tensors[x].shape[1]
    m, s = quantize_multiplier(1.0 / (h * h))
    # averaging keeps the mean but shrinks the spread of a post-ReLU map
    rms = _ACT_STD / 2
    x = g.add("avgpool", AvgPool(h, 1, m, s), [x])
    layer("fc", Dense(1000), (1000, 1024), 1024, relu=False)
    return g.build([x])


def sample_inputs(graph: Graph, seed: int = 0):
    """Uniform random input tensors (i8 or i32) for every graph input, in order."""
    rng = np.random.default_rng(seed)
    out = []
    for name in graph.inputs:
        desc = graph.tensors[name]
        lo, hi = (-128, 128) if desc.dtype.itemsize == 1 else (-(2**31), 2**31)
        out.append(rng.integers(lo, hi, size=desc.shape, dtype=np.int64).astype(desc.dtype.numpy))
    return out


FIXTURES = {"mnist": build_mnist_fixture, "mobilenet": build_mobilenet_v1_fixture}

"""Random small quantized graphs for differential testing.

Graphs respect the dtype rule (i32 tensors feed only Requantize/EwAdd32),
mix every node kind, and include branches that rejoin through elementwise
ops so the partitioner sees non-chain topologies.
"""

import numpy as np

from dlacc.builder import GraphBuilder
from dlacc.graph import (
    AvgPool, Conv2D, Dense, DepthwiseConv2D, DType, EwAbs, EwAdd, EwAdd32, EwMax, EwMin, LeakyRelu,
    MaxPool, Pad, Relu, Requant, Requantize,
)


def _requant(rng):
    if rng.random() < 0.1:
        return int(rng.integers(1, 2**31)), int(rng.integers(0, 63))
    return int(rng.integers(2**29, 2**31)), int(rng.integers(30, 42))


class _Gen:
    def __init__(self, rng, name):
        self.rng = rng
        self.b = GraphBuilder(name)
        self.i8 = []  # i8 tensors available as operands
        self.n = 0

    def nid(self, prefix):
        self.n += 1
        return f"{prefix}{self.n}"

    def shape(self, t):
        return self.b.tensors[t].shape

    def pick(self):
        # prefer recent tensors so graphs get some depth
        k = len(self.i8)
        idx = k - 1 - min(int(self.rng.geometric(0.5)) - 1, k - 1)
        return self.i8[idx]

    def weights(self, kshape):
        k = self.rng.integers(-128, 128, size=kshape).astype(np.int8)
        bias = self.rng.integers(-5000, 5000, size=kshape[0]).astype(np.int32)
        return k, bias

    def finish_i32(self, acc):
        """Consume an i32 tensor, sometimes via EwAdd32 with a sibling."""
        rng = self.rng
        if rng.random() < 0.2:
            other = self.b.add(self.nid("neg"), Requantize(*_requant(rng)), [acc])
            # i8 -> i32 sibling of the same shape: a 1x1 conv keeps geometry
            c = self.shape(other)[3]
            k, bias = self.weights((c, 1, 1, c))
            sib = self.b.add(self.nid("sib"), Conv2D(1, 1, 1, Pad.VALID, c), [other], kernel=k,
                             bias=bias)
            acc = self.b.add(self.nid("add32_"), EwAdd32(), [acc, sib])
        m, s = _requant(rng)
        lo = int(rng.choice([-128, 0, -20]))
        out = self.b.add(self.nid("rq"), Requantize(m, s, clamp_lo=lo, clamp_hi=127,
                                                    barrier=bool(rng.random() < 0.5)), [acc])
        return out

    def weighted(self, x):
        rng = self.rng
        _, h, w, c = self.shape(x)
        choice = rng.choice(["conv", "dw", "dense"], p=[0.5, 0.3, 0.2])
        i8_out = rng.random() < 0.4
        rq = Requant(*_requant(rng)) if i8_out else None
        dt = DType.I8 if i8_out else DType.I32
        if choice == "dense":
            f = int(rng.integers(1, 17))
            k, bias = self.weights((f, h * w * c))
            t = self.b.add(self.nid("fc"), Dense(f, dt, rq), [x], kernel=k, bias=bias)
        else:
            pad = Pad.SAME if rng.random() < 0.6 else Pad.VALID
            kh = int(rng.integers(1, 4 if pad is Pad.SAME else min(h, 3) + 1))
            kw = int(rng.integers(1, 4 if pad is Pad.SAME else min(w, 3) + 1))
            stride = int(rng.integers(1, 3))
            if choice == "conv":
                cout = int(rng.integers(1, 17))
                k, bias = self.weights((cout, kh, kw, c))
                relu = bool(i8_out and rng.random() < 0.5)
                op = Conv2D(kh, kw, stride, pad, cout, relu, dt, rq)
                t = self.b.add(self.nid("conv"), op, [x], kernel=k, bias=bias)
            else:
                k, bias = self.weights((c, kh, kw))
                op = DepthwiseConv2D(kh, kw, stride, pad, dt, rq)
                t = self.b.add(self.nid("dw"), op, [x], kernel=k, bias=bias)
        return t if i8_out else self.finish_i32(t)

    def unary(self, x):
        rng = self.rng
        _, h, w, _ = self.shape(x)
        kinds = ["relu", "lrelu", "abs", "rq"]
        if min(h, w) >= 2:
            kinds += ["maxpool", "avgpool"]
        kind = rng.choice(kinds)
        if kind == "relu":
            return self.b.add(self.nid("relu"), Relu(), [x])
        if kind == "lrelu":
            return self.b.add(self.nid("lrelu"), LeakyRelu(int(rng.integers(1, 2**31)),
                                                          int(rng.integers(28, 36))), [x])
        if kind == "abs":
            return self.b.add(self.nid("abs"), EwAbs(), [x])
        if kind == "rq":
            m, s = _requant(rng)
            return self.b.add(self.nid("rq8_"), Requantize(m, s - 2 if s > 2 else s,
                                                         barrier=bool(rng.random() < 0.3)), [x])
        k = int(rng.integers(2, min(h, w, 3) + 1))
        stride = int(rng.integers(1, k + 1))
        if kind == "maxpool":
            return self.b.add(self.nid("maxpool"), MaxPool(k, stride), [x])
        m, s = _requant(rng)
        return self.b.add(self.nid("avgpool"), AvgPool(k, stride, m, s), [x])

    def binary(self, x):
        rng = self.rng
        same = [t for t in self.i8 if t != x and self.shape(t) == self.shape(x)]
        other = same[int(rng.integers(len(same)))] if same else self.unary_same(x)
        op = rng.choice([EwAdd, EwMin, EwMax])
        return self.b.add(self.nid(op.__name__.lower()), op(), [x, other])

    def unary_same(self, x):
        op = [Relu(), EwAbs()][int(self.rng.integers(2))]
        return self.b.add(self.nid("br"), op, [x])


def random_graph(seed: int, max_nodes: int = 8):
    rng = np.random.default_rng(seed)
    g = _Gen(rng, f"random{seed}")
    h, w = (int(v) for v in rng.integers(1, 9, size=2))
    c = int(rng.integers(1, 13))
    g.i8.append(g.b.input("x", (1, h, w, c), 0.05))
    if rng.random() < 0.25:
        g.i8.append(g.b.input("y", (1, h, w, c), 0.05))
    steps = int(rng.integers(1, max_nodes + 1))
    for _ in range(steps):
        x = g.pick()
        r = rng.random()
        if r < 0.4:
            t = g.weighted(x)
        elif r < 0.75:
            t = g.unary(x)
        else:
            t = g.binary(x)
        g.i8.append(t)
    outs = [g.i8[-1]]
    if len(g.i8) > 3 and rng.random() < 0.3:
        extra = g.i8[int(rng.integers(len(g.i8) - 1))]
        if extra not in outs and extra not in g.b.inputs:
            outs.append(extra)
    return g.b.build(outs)


def random_inputs(graph, seed: int):
    rng = np.random.default_rng(seed)
    return [rng.integers(-128, 128, size=graph.tensors[n].shape).astype(np.int8)
            for n in graph.inputs]

"""Independent, deliberately naive reference implementations.

Nothing here imports dlacc.kernels or numpy arithmetic: values are Python
ints, loops are explicit, and rounding is done with Fraction so that the
package's kernels are checked against a second derivation, not against
themselves.
"""

from fractions import Fraction
from itertools import product
from math import ceil, floor


def wrap32(v):
    v &= 0xFFFFFFFF
    return v - (1 << 32) if v >= 1 << 31 else v


def round_half_away(q: Fraction) -> int:
    if q >= 0:
        return floor(q + Fraction(1, 2))
    return -floor(-q + Fraction(1, 2))


def requant(v, m, s, lo=-128, hi=127):
    return max(lo, min(hi, round_half_away(Fraction(v * m, 2**s))))


def sat8(v):
    return max(-128, min(127, v))


def same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def geometry(h, w, kh, kw, stride, pad):
    if pad == "same":
        ho, pt, pb = same_pads(h, kh, stride)
        wo, pl, pr = same_pads(w, kw, stride)
        return ho, wo, pt, pl
    return (h - kh) // stride + 1, (w - kw) // stride + 1, 0, 0


def _at(x, y, xx, c):
    """Zero-padded read of nested list x[y][xx][c]."""
    if 0 <= y < len(x) and 0 <= xx < len(x[0]):
        return x[y][xx][c]
    return 0


def conv2d(x, w, bias, stride, pad):
    """x[h][w][c], w[co][ky][kx][ci] -> accumulator list (wrapped i32)."""
    h, wd = len(x), len(x[0])
    cout, kh, kw = len(w), len(w[0]), len(w[0][0])
    cin = len(x[0][0])
    ho, wo, pt, pl = geometry(h, wd, kh, kw, stride, pad)
    out = [[[0] * cout for _ in range(wo)] for _ in range(ho)]
    for oy in range(ho):
        for ox in range(wo):
            for co in range(cout):
                acc = bias[co]
                for ky in range(kh):
                    for kx in range(kw):
                        for ci in range(cin):
                            acc += _at(x, oy * stride + ky - pt, ox * stride + kx - pl, ci) * \
                                w[co][ky][kx][ci]
                out[oy][ox][co] = wrap32(acc)
    return out


def depthwise(x, w, bias, stride, pad):
    h, wd, c = len(x), len(x[0]), len(x[0][0])
    kh, kw = len(w[0]), len(w[0][0])
    ho, wo, pt, pl = geometry(h, wd, kh, kw, stride, pad)
    out = [[[0] * c for _ in range(wo)] for _ in range(ho)]
    for oy in range(ho):
        for ox in range(wo):
            for ch in range(c):
                acc = bias[ch]
                for ky in range(kh):
                    for kx in range(kw):
                        acc += _at(x, oy * stride + ky - pt, ox * stride + kx - pl, ch) * w[ch][ky][kx]
                out[oy][ox][ch] = wrap32(acc)
    return out


def dense(xflat, w, bias):
    return [wrap32(bias[o] + sum(a * b for a, b in zip(xflat, w[o]))) for o in range(len(w))]


def pool(x, k, stride, fn):
    h, wd, c = len(x), len(x[0]), len(x[0][0])
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    return [[[fn([x[oy * stride + dy][ox * stride + dx][ch] for dy in range(k) for dx in range(k)])
              for ch in range(c)] for ox in range(wo)] for oy in range(ho)]


def leaky(v, m, s):
    return v if v >= 0 else sat8(round_half_away(Fraction(v * m, 2**s)))


def mapv(fn, *xs):
    """Apply fn elementwise over equally shaped nested lists."""
    if isinstance(xs[0], list):
        return [mapv(fn, *parts) for parts in zip(*xs)]
    return fn(*xs)


def flatten(x):
    if isinstance(x, list):
        return [v for part in x for v in flatten(part)]
    return [x]


def nest(flat, shape):
    """C-order nested list (H, W, C) from a flat list."""
    h, w, c = shape
    return [[[flat[(y * w + xx) * c + ch] for ch in range(c)] for xx in range(w)] for y in range(h)]


# --------------------------------------------------------------------------
# Whole-graph oracle
# --------------------------------------------------------------------------


def _weights(graph, node):
    """(kernel nested list, bias list) decoded straight from the blob bytes."""
    import struct

    kshape = node.op.kernel_shape(graph.tensors[node.inputs[0]])
    n = 1
    for e in kshape:
        n *= e
    raw = graph.weights[node.weight.offset:node.weight.offset + n]
    flat = list(struct.unpack(f"<{n}b", raw))
    braw = graph.weights[node.weight.offset + n:node.weight.offset + n + 4 * kshape[0]]
    bias = list(struct.unpack(f"<{kshape[0]}i", braw))

    def build(dims, off):
        if len(dims) == 1:
            return flat[off:off + dims[0]]
        step = 1
        for d in dims[1:]:
            step *= d
        return [build(dims[1:], off + i * step) for i in range(dims[0])]

    return build(list(kshape), 0), bias


def eval_node_naive(graph, node, env):
    kind = node.op.kind
    a = node.op
    ins = [env[t] for t in node.inputs]
    x = ins[0]
    if kind in ("Conv2D", "DepthwiseConv2D", "Dense"):
        w, b = _weights(graph, node)
        if kind == "Conv2D":
            acc = conv2d(x, w, b, a.stride, a.pad.value)
        elif kind == "DepthwiseConv2D":
            acc = depthwise(x, w, b, a.stride, a.pad.value)
        else:
            acc = [[dense(flatten(x), w, b)]]
        if a.requant is not None:
            m, s = a.requant.multiplier, a.requant.shift
            acc = mapv(lambda v: requant(v, m, s), acc)
        if getattr(a, "fuse_relu", False):
            acc = mapv(lambda v: max(v, 0), acc)
        return acc
    if kind == "Requantize":
        return mapv(lambda v: requant(v, a.multiplier, a.shift, a.clamp_lo, a.clamp_hi), x)
    if kind == "Relu":
        return mapv(lambda v: max(v, 0), x)
    if kind == "LeakyRelu":
        return mapv(lambda v: leaky(v, a.multiplier, a.shift), x)
    if kind == "MaxPool":
        return pool(x, a.k, a.stride, max)
    if kind == "AvgPool":
        return pool(x, a.k, a.stride, lambda vals: requant(sum(vals), a.multiplier, a.shift))
    if kind == "EwAdd":
        return mapv(lambda p, q: sat8(p + q), x, ins[1])
    if kind == "EwAdd32":
        return mapv(lambda p, q: wrap32(p + q), x, ins[1])
    if kind == "EwAbs":
        return mapv(lambda p: sat8(abs(p)), x)
    if kind == "EwMin":
        return mapv(min, x, ins[1])
    if kind == "EwMax":
        return mapv(max, x, ins[1])
    raise NotImplementedError(kind)


def interpret_naive(graph, inputs):
    """inputs: flat int lists per graph input; returns flat int lists per output."""
    env = {}
    for name, flat in zip(graph.inputs, inputs):
        env[name] = nest([int(v) for v in flat], graph.tensors[name].shape[1:])
    remaining = list(graph.nodes)
    while remaining:  # independent topological walk
        for node in remaining:
            if all(t in env for t in node.inputs):
                env[node.output] = eval_node_naive(graph, node, env)
                remaining.remove(node)
                break
        else:
            raise ValueError("graph has a cycle")
    return [flatten(env[name]) for name in graph.outputs]


# --------------------------------------------------------------------------
# PE-schedule enumerator
# --------------------------------------------------------------------------


def _schedule(groups, p):
    """Issue work groups cycle by cycle on p lanes.

    Each group is a list of lane-parallel work items (items of one group may
    share a cycle, items of different groups may not). Returns (cycles, items).
    """
    cycles = items = 0
    for group in groups:
        pending = list(group)
        while pending:
            lanes = pending[:p]
            pending = pending[p:]
            cycles += 1
            items += len(lanes)
    return cycles, items


def enumerate_conv(ho, wo, kh, kw, cin, ct, p, mode):
    """Brute-force cycle count of a conv tile.

    Output parallel: the MACs of one (pixel, tap, input channel) are spread
    across output-channel lanes. Input parallel: the MACs of one (pixel, tap,
    output channel) are spread across input-channel lanes.
    """
    groups = []
    for oy, ox, ky, kx in product(range(ho), range(wo), range(kh), range(kw)):
        if mode == "output":
            for ci in range(cin):
                groups.append([(oy, ox, ky, kx, ci, co) for co in range(ct)])
        else:
            for co in range(ct):
                groups.append([(oy, ox, ky, kx, ci, co) for ci in range(cin)])
    return _schedule(groups, p)


def enumerate_depthwise(ho, wo, kh, kw, ct, p):
    groups = [[(oy, ox, ky, kx, c) for c in range(ct)]
              for oy, ox, ky, kx in product(range(ho), range(wo), range(kh), range(kw))]
    return _schedule(groups, p)


def enumerate_pool(ho, wo, k, ct, p):
    return enumerate_depthwise(ho, wo, k, k, ct, p)


def enumerate_elementwise(n, p):
    return _schedule([list(range(n))], p)


def closed_ceil(a, b):
    return ceil(a / b)

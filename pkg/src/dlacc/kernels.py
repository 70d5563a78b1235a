"""Exact integer kernels on numpy arrays (HWC layout, batch dimension dropped).

Accumulation happens in float64 through BLAS where profitable: every partial
sum of i8*i8 products stays far below 2**53, so the result is exact and is
converted back to int64 before any wrapping or rounding.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import I8_MAX, I8_MIN

# largest reduction length for which float64 accumulation is provably exact
_EXACT_TERMS = 2**53 // (128 * 128)


def wrap_i32(x):
    """Two's-complement wrap of an integer array into int32."""
    x = np.asarray(x, dtype=np.int64)
    return ((x + 2**31) % 2**32 - 2**31).astype(np.int32)


def rshift_round(x, shift):
    """``x / 2**shift`` rounded to nearest, ties away from zero (int64 in/out)."""
    x = np.asarray(x, dtype=np.int64)
    if shift == 0:
        return x
    half = np.int64(1) << np.int64(shift - 1)
    mag = (np.abs(x) + half) >> np.int64(shift)
    return np.where(x < 0, -mag, mag)


def requantize(acc, multiplier, shift, lo=I8_MIN, hi=I8_MAX):
    """``clamp(rshift_round(acc * multiplier, shift), lo, hi)`` as int8."""
    scaled = rshift_round(np.asarray(acc, dtype=np.int64) * np.int64(multiplier), shift)
    return np.clip(scaled, lo, hi).astype(np.int8)


def saturate_i8(x):
    return np.clip(np.asarray(x, dtype=np.int64), I8_MIN, I8_MAX).astype(np.int8)


def quantize_multiplier(real):
    """Decompose a positive real factor into (multiplier, shift) with a 31-bit multiplier."""
    if not real > 0:
        raise ValueError("factor must be positive")
    mant, exp = math.frexp(real)  # real = mant * 2**exp, mant in [0.5, 1)
    mult = round(mant * 2**31)
    if mult == 2**31:
        mult //= 2
        exp += 1
    shift = 31 - exp
    while shift > 62:
        mult >>= 1
        shift -= 1
    if shift < 0:
        raise ValueError(f"factor {real} too large for a 31-bit multiplier")
    return max(int(mult), 1), int(shift)


def _matmul_exact(a, b):
    """Integer matrix product of int8-ranged operands, exact in int64."""
    if a.shape[-1] <= _EXACT_TERMS:
        return np.rint(a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    return a.astype(np.int64) @ b.astype(np.int64)


def _pad(x, pads, value=0):
    top, bottom, left, right = pads
    if not any(pads):
        return x
    return np.pad(x, ((top, bottom), (left, right), (0, 0)), constant_values=value)


def conv2d_acc(x, w, bias, stride, pads):
    """Conv accumulator. x (H,W,Cin) i8, w (Cout,Kh,Kw,Cin) i8, bias (Cout,) i32 -> i32."""
    _, kh, kw, cin = w.shape
    xp = _pad(x, pads)
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    # win: (Ho, Wo, Cin, Kh, Kw) -> (Ho, Wo, Kh, Kw, Cin)
    ho, wo = win.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    acc = _matmul_exact(cols, w.reshape(w.shape[0], -1).T)
    acc = acc + np.asarray(bias, dtype=np.int64)
    return wrap_i32(acc).reshape(ho, wo, w.shape[0])


def depthwise_acc(x, w, bias, stride, pads):
    """Depthwise accumulator. x (H,W,C) i8, w (C,Kh,Kw) i8, bias (C,) i32 -> i32."""
    _, kh, kw = w.shape
    xp = _pad(x, pads)
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    acc = np.einsum("hwckl,ckl->hwc", win.astype(np.int64), w.astype(np.int64))
    return wrap_i32(acc + np.asarray(bias, dtype=np.int64))


def dense_acc(x, w, bias):
    """x flat (F_in,) i8, w (F_out, F_in) i8 -> (F_out,) i32."""
    acc = _matmul_exact(x.reshape(1, -1), w.T)[0]
    return wrap_i32(acc + np.asarray(bias, dtype=np.int64))


def max_pool(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(0, 1))[::stride, ::stride]
    return win.max(axis=(3, 4)).astype(x.dtype)


def avg_pool(x, k, stride, multiplier, shift):
    win = sliding_window_view(x, (k, k), axis=(0, 1))[::stride, ::stride]
    total = win.astype(np.int64).sum(axis=(3, 4))
    return requantize(total, multiplier, shift)


def leaky_relu(x, multiplier, shift):
    v = np.asarray(x, dtype=np.int64)
    neg = rshift_round(v * np.int64(multiplier), shift)
    return saturate_i8(np.where(v >= 0, v, neg))


def finish_conv(acc, requant=None, relu=False):
    """Apply the optional fused requant and ReLU to an i32 accumulator."""
    out = acc
    if requant is not None:
        out = requantize(acc, requant[0], requant[1])
    if relu:
        out = np.maximum(out, 0).astype(out.dtype)
    return out

"""Integer convolution kernels, residual addition, and the pooled head.

Two interchangeable convolution paths produce bit-identical int32
accumulators:

* ``conv_w1a2_naive`` -- direct integer dot products of +/-1 signs against
  2-bit codes, one int64 matmul per kernel tap.  Simple enough to serve as
  the oracle for the fast path.
* ``conv_w1a2_popcount`` -- bitplane decomposition.  For one 64-lane word
  of weight bits ``wb`` and one activation bitplane ``p``:

      sum_lanes(signs * plane_bits) = 2 * popcount(wb & p) - popcount(p)

  and the 2-bit code contributes ``2 * hi_dot + lo_dot``.  Pad lanes are
  zero in both planes, so they add nothing regardless of their weight bits.

Zero padding uses activation code 0, which contributes exactly 0 to any
+/-1-weighted sum, making pad semantics bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .instrument import note_float_ops
from .tensor import ACC_DTYPE, PackedPlanes, PackedWeights, ensure_act2, popcount


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.in_ch < 1 or self.out_ch < 1 or self.kh < 1 or self.kw < 1:
            raise ConfigError(f"conv dimensions must be >= 1: {self}")
        if min(self.stride) < 1:
            raise ConfigError(f"stride must be >= 1: {self.stride}")
        if min(self.padding) < 0:
            raise ConfigError(f"padding must be >= 0: {self.padding}")

    @property
    def fan_in(self) -> int:
        return self.in_ch * self.kh * self.kw

    @property
    def acc_bound(self) -> int:
        """Largest possible |accumulator| value: every tap at code 3."""
        return 3 * self.fan_in

    def out_spatial(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding[0] - self.kh) // self.stride[0] + 1
        ow = (w + 2 * self.padding[1] - self.kw) // self.stride[1] + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return oh, ow


def _tap_window(padded: np.ndarray, i: int, j: int, stride, oh: int, ow: int) -> np.ndarray:
    sh, sw = stride
    return padded[..., i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw]


def conv_w1a2_naive(x: np.ndarray, signs: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Direct integer convolution of 2-bit codes against +/-1 signs.

    ``signs`` is the unpacked (OC, IC, kh, kw) view of the weights.
    Returns the int32 accumulator map (OC, OH, OW).
    """
    x = ensure_act2(x)
    signs = np.asarray(signs)
    if x.shape[0] != spec.in_ch:
        raise ShapeError(f"input has {x.shape[0]} channels, spec wants {spec.in_ch}")
    if signs.shape != (spec.out_ch, spec.in_ch, spec.kh, spec.kw):
        raise ShapeError(f"weight shape {signs.shape} does not match {spec}")
    ph, pw = spec.padding
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw))).astype(np.int64)
    oh, ow = spec.out_spatial(x.shape[1], x.shape[2])
    w2 = signs.astype(np.int64)
    acc = np.zeros((spec.out_ch, oh * ow), dtype=np.int64)
    for i in range(spec.kh):
        for j in range(spec.kw):
            win = _tap_window(padded, i, j, spec.stride, oh, ow)
            acc += w2[:, :, i, j] @ win.reshape(spec.in_ch, oh * ow)
    return _check_acc(acc.reshape(spec.out_ch, oh, ow), spec)


def conv_w1a2_popcount(x: PackedPlanes, w: PackedWeights, spec: ConvSpec) -> np.ndarray:
    """Popcount convolution over packed bitplanes; equals the naive kernel."""
    if x.channels != spec.in_ch or w.in_channels != spec.in_ch:
        raise ShapeError(
            f"channel mismatch: planes {x.channels}, weights {w.in_channels}, spec {spec.in_ch}"
        )
    if (w.out_channels, *w.kernel) != (spec.out_ch, spec.kh, spec.kw):
        raise ShapeError(f"weight geometry {w.bits.shape} does not match {spec}")
    h, wd = x.spatial
    oh, ow = spec.out_spatial(h, wd)
    ph, pw = spec.padding
    pad = ((0, 0), (ph, ph), (pw, pw))
    hi = np.pad(x.hi, pad)
    lo = np.pad(x.lo, pad)
    acc = np.zeros((spec.out_ch, oh, ow), dtype=np.int64)
    for i in range(spec.kh):
        for j in range(spec.kw):
            wb = w.bits[:, :, i, j]  # (OC, words)
            hw = _tap_window(hi, i, j, spec.stride, oh, ow)  # (words, OH, OW)
            lw = _tap_window(lo, i, j, spec.stride, oh, ow)
            base = 2 * popcount(hw).sum(axis=0, dtype=np.int64) + popcount(lw).sum(
                axis=0, dtype=np.int64
            )
            hits = 2 * popcount(wb[:, :, None, None] & hw[None]).sum(
                axis=1, dtype=np.int64
            ) + popcount(wb[:, :, None, None] & lw[None]).sum(axis=1, dtype=np.int64)
            acc += 2 * hits - base
    return _check_acc(acc, spec)


def _check_acc(acc: np.ndarray, spec: ConvSpec) -> np.ndarray:
    bound = spec.acc_bound
    if acc.size and (acc.max() > bound or acc.min() < -bound):
        raise ShapeError(f"accumulator exceeded bound {bound} for {spec}")
    return acc.astype(ACC_DTYPE)


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise integer sum of two accumulator maps."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"residual shapes differ: {a.shape} vs {b.shape}")
    if not (np.issubdtype(a.dtype, np.integer) and np.issubdtype(b.dtype, np.integer)):
        raise ShapeError("residual_add requires integer accumulators")
    out = a.astype(np.int64) + b.astype(np.int64)
    if out.size and max(out.max(), -out.min()) >= np.iinfo(ACC_DTYPE).max:
        raise ShapeError("residual sum overflows the 32-bit accumulator")
    return out.astype(ACC_DTYPE)


def avgpool_and_scale(acc: np.ndarray, alpha_out: float) -> np.ndarray:
    """Global average pooling followed by the output scaling factor.

    Integer summation first, one real division and multiplication last;
    exactly equal to pooling the real-valued alpha * acc map since the
    composition is linear.
    """
    acc = np.asarray(acc)
    if acc.ndim != 3 or acc.shape[1] < 1 or acc.shape[2] < 1:
        raise ShapeError(f"expected non-empty (C, H, W) accumulator, got {acc.shape}")
    sums = acc.sum(axis=(1, 2), dtype=np.int64)
    area = acc.shape[1] * acc.shape[2]
    note_float_ops(2 * sums.size)
    return float(alpha_out) * (sums.astype(np.float64) / area)

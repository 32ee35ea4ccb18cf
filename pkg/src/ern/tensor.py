"""Core tensor representations and bit packing.

Layout rules shared by the whole engine:

* Activations are channel-major ``(C, H, W)``, row-major within a plane.
  The canonical form is one byte per 2-bit code (``uint8`` values 0..3);
  the packed two-bitplane form is a derived fast path.
* Bit packing groups 64 channels into one ``uint64`` word, LSB-first:
  bit ``j`` of word ``i`` is channel ``64*i + j``.  Channel counts are
  padded up to a multiple of 64; pad lanes carry activation code 0, which
  contributes exactly 0 to any +/-1-weighted sum, so pad weight bits are
  don't-care.  We fix pad weight bits to 1 for byte-exact reproducibility.
* A 2-bit code decomposes as ``code = 2*hi_bit + lo_bit``.

Integer accumulators are ``int32`` arrays; their magnitude is bounded by
3 * fan_in of the producing convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

LANES = 64
_SHIFTS = np.arange(LANES, dtype=np.uint64)

ACC_DTYPE = np.int32


def padded_channels(c: int) -> int:
    """Round a channel count up to a whole number of 64-lane words."""
    return -(-c // LANES) * LANES


def popcount(words: np.ndarray) -> np.ndarray:
    """Per-element population count of a uint64 array, as uint8."""
    return np.bitwise_count(words)


def ensure_act2(a: np.ndarray) -> np.ndarray:
    """Validate a canonical 2-bit activation map: uint8 (C, H, W), codes <= 3."""
    a = np.asarray(a)
    if a.ndim != 3 or min(a.shape) < 1:
        raise ShapeError(f"activation tensor must be (C, H, W) with dims >= 1, got {a.shape}")
    if a.dtype != np.uint8:
        if not np.issubdtype(a.dtype, np.integer):
            raise DomainError(f"activation codes must be integers, got dtype {a.dtype}")
        if a.min() < 0 or a.max() > 3:
            raise DomainError("activation codes must lie in {0,1,2,3}")
        a = a.astype(np.uint8)
    elif a.max(initial=0) > 3:
        raise DomainError("activation codes must lie in {0,1,2,3}")
    return a


def ensure_finite(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if not np.isfinite(w).all():
        raise DomainError("tensor contains NaN or Inf")
    return w


def _pack_lanes(bits: np.ndarray, axis: int) -> np.ndarray:
    """Pack a 0/1 array along `axis` (length multiple of 64) into uint64 words."""
    lanes = np.moveaxis(bits, axis, 0)
    n = lanes.shape[0]
    assert n % LANES == 0
    lanes = lanes.reshape(n // LANES, LANES, *lanes.shape[1:]).astype(np.uint64)
    shifts = _SHIFTS.reshape((1, LANES) + (1,) * (lanes.ndim - 2))
    words = np.bitwise_or.reduce(lanes << shifts, axis=1)
    return np.moveaxis(words, 0, axis)


def _unpack_lanes(words: np.ndarray, axis: int, count: int) -> np.ndarray:
    """Inverse of :func:`_pack_lanes`; returns uint8 0/1 with `count` lanes."""
    w = np.moveaxis(words, axis, 0)
    shifts = _SHIFTS.reshape((1, LANES) + (1,) * (w.ndim - 1))
    bits = ((w[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    bits = bits.reshape(w.shape[0] * LANES, *w.shape[1:])[:count]
    return np.moveaxis(bits, 0, axis)


@dataclass(frozen=True)
class PackedPlanes:
    """Two bitplanes of a 2-bit activation map, channels packed 64 per word.

    ``hi`` and ``lo`` have shape (C_pad/64, H, W) with dtype uint64; pad
    lanes are all-zero in both planes so they never contribute to a
    popcount dot product.
    """

    hi: np.ndarray
    lo: np.ndarray
    channels: int  # logical (unpadded) channel count

    @property
    def words(self) -> int:
        return self.hi.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.hi.shape[1], self.hi.shape[2]


@dataclass(frozen=True)
class PackedWeights:
    """Binary conv weights as bit-packed sign planes plus scaling metadata.

    ``bits`` has shape (OC, IC_pad/64, kh, kw) with dtype uint64; bit 1
    means weight +1, bit 0 means -1.  Pad lanes are fixed to 1.  ``alpha``
    is the per-output-channel scaling factor (all entries equal to the
    shared constant when ``const_scaled`` is set).
    """

    bits: np.ndarray
    alpha: np.ndarray
    in_channels: int  # logical (unpadded) input channel count
    const_scaled: bool = False

    @property
    def out_channels(self) -> int:
        return self.bits.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.bits.shape[2], self.bits.shape[3]

    def unpack_signs(self) -> np.ndarray:
        """Expand to an int8 (OC, IC, kh, kw) array of +/-1 (pads dropped)."""
        bits = _unpack_lanes(self.bits, 1, self.in_channels)
        return (bits.astype(np.int8) * 2) - 1


def pack_activations(a: np.ndarray) -> PackedPlanes:
    """Pack a canonical activation map into hi/lo bitplanes.

    Bit j of word i corresponds to channel 64*i + j; hi bit = code div 2,
    lo bit = code mod 2.  Pad lanes hold code 0.
    """
    a = ensure_act2(a)
    c, h, w = a.shape
    c_pad = padded_channels(c)
    if c_pad != c:
        padded = np.zeros((c_pad, h, w), dtype=np.uint8)
        padded[:c] = a
        a = padded
    return PackedPlanes(hi=_pack_lanes(a >> 1, 0), lo=_pack_lanes(a & 1, 0), channels=c)


def unpack_activations(p: PackedPlanes, channels: int) -> np.ndarray:
    """Recover the canonical uint8 activation map from packed planes."""
    if channels > p.words * LANES:
        raise ShapeError(f"cannot unpack {channels} channels from {p.words} words")
    hi = _unpack_lanes(p.hi, 0, channels)
    lo = _unpack_lanes(p.lo, 0, channels)
    return (hi << 1) | lo


def pack_weights(signs: np.ndarray, alpha: np.ndarray, const_scaled: bool = False) -> PackedWeights:
    """Bit-pack a +/-1 sign tensor with its per-output-channel scales.

    Every element of ``signs`` must be exactly +1 or -1; ``alpha`` must be
    positive.  Pad lanes are set to bit 1 (never contribute because padded
    activations are 0).
    """
    signs = np.asarray(signs)
    if signs.ndim != 4:
        raise ShapeError(f"weight signs must be (OC, IC, kh, kw), got {signs.shape}")
    if not np.isin(signs, (-1, 1)).all():
        raise DomainError("weight signs must be exactly +1 or -1")
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (signs.shape[0],):
        raise ShapeError(f"alpha must have one entry per output channel, got {alpha.shape}")
    if not (alpha > 0).all():
        raise DomainError("alpha must be positive")
    oc, ic, kh, kw = signs.shape
    ic_pad = padded_channels(ic)
    bits = np.ones((oc, ic_pad, kh, kw), dtype=np.uint8)
    bits[:, :ic] = signs > 0
    return PackedWeights(
        bits=_pack_lanes(bits, 1),
        alpha=alpha,
        in_channels=ic,
        const_scaled=const_scaled,
    )

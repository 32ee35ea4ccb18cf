"""Generalized thermometer encoding of 8-bit pixels into 2-bit activations.

An 8-bit value x is mapped to a length-k vector of l-bit codes through a
per-index affine function followed by floor and clamp:

    s    = max(1, floor(255 / ((2^l - 1) * k)))      # bin width
    w_i  = 1 / (s * k)
    b_i  = 1 - (i + 1) / k
    z_i  = clamp(floor(w_i * x + b_i), 0, 2^l - 1)

Every output channel is monotonically non-decreasing in x, and distinct
output vectors are totally ordered element-wise.  With l=2 and k=10 a
3-channel RGB image becomes a 30-channel 2-bit activation map.

Channel ordering is color-major: the k channels of R first, then G, then B.
Any fixed order is valid (the first conv layer is permutation-covariant);
this one is the documented file-format convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .instrument import note_float_ops


@dataclass(frozen=True)
class ThermoParams:
    k: int
    l: int
    s: int
    w: np.ndarray  # per-index slope, length k
    b: np.ndarray  # per-index offset, length k

    @property
    def max_code(self) -> int:
        return (1 << self.l) - 1

    @property
    def levels(self) -> int:
        """Distinct code vectors over the 8-bit input range."""
        return ((1 << self.l) - 1) * self.k + 1


def thermo_params(k: int, l: int = 2) -> ThermoParams:
    """Build encoding parameters for vector length k and bit width l."""
    if k < 1:
        raise DomainError(f"thermometer length k must be >= 1, got {k}")
    if not 1 <= l <= 8:
        raise DomainError(f"bit width l must be in [1, 8], got {l}")
    s = max(1, int(255 // (((1 << l) - 1) * k)))
    idx = np.arange(k, dtype=np.float64)
    w = np.full(k, 1.0 / (s * k), dtype=np.float64)
    b = 1.0 - (idx + 1.0) / k
    return ThermoParams(k=k, l=l, s=s, w=w, b=b)


def _code_table(p: ThermoParams) -> np.ndarray:
    """(k, 256) uint8 table of codes for every possible 8-bit input."""
    x = np.arange(256, dtype=np.float64)
    y = p.w[:, None] * x[None, :] + p.b[:, None]
    note_float_ops(2 * y.size)
    z = np.clip(np.floor(y), 0, p.max_code)
    return z.astype(np.uint8)


def encode_pixel(x: int, p: ThermoParams) -> np.ndarray:
    """Encode one 8-bit value into its length-k code vector."""
    if not 0 <= int(x) <= 255:
        raise DomainError(f"pixel value must be in [0, 255], got {x}")
    return _code_table(p)[:, int(x)].copy()


def encode_image(img: np.ndarray, p: ThermoParams) -> np.ndarray:
    """Encode an 8-bit (3, H, W) image into a (3k, H, W) activation map.

    Output channel c*k + i holds code i of input channel c.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be (3, H, W), got {img.shape}")
    if img.dtype != np.uint8:
        if not np.issubdtype(img.dtype, np.integer):
            raise DomainError(f"image must hold 8-bit integers, got dtype {img.dtype}")
        if img.min() < 0 or img.max() > 255:
            raise DomainError("image values must be in [0, 255]")
        img = img.astype(np.uint8)
    table = _code_table(p)
    codes = table[:, img]  # (k, 3, H, W)
    codes = np.moveaxis(codes, 0, 1)  # (3, k, H, W)
    return np.ascontiguousarray(codes.reshape(3 * p.k, *img.shape[1:]))

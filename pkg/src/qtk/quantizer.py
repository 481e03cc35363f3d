"""Symmetric uniform quantization on a step-size grid.

Grid convention: a signed quantizer with step ``delta`` and ``bits`` = M
uses integer levels k in [-2^(M-1), +2^(M-1)] (both clamp bounds are
representable); an unsigned quantizer uses k in [0, 2^M - 1]. The
clipping value is therefore c = 2^(M-1) * delta (signed) or
c = (2^M - 1) * delta (unsigned), and it is always derived from delta,
never stored. Rounding is half-to-even everywhere, so results are
identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import QtkError
from .tensor import Tensor

__all__ = [
    "QuantParams",
    "quantize",
    "quantize_array",
    "clipping_of",
    "params_from_clipping",
    "lp_error",
]


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor quantizer: step size, bitwidth, signedness."""

    delta: float
    bits: int
    signed: bool = True

    def __post_init__(self):
        if not (self.delta > 0.0 and np.isfinite(self.delta)):
            raise QtkError(f"step size must be positive and finite, got {self.delta}")
        if not 2 <= self.bits <= 8:
            raise QtkError(f"bitwidth must be in [2, 8], got {self.bits}")

    @property
    def top_level(self) -> int:
        """Largest integer grid level."""
        return 2 ** (self.bits - 1) if self.signed else 2**self.bits - 1

    @property
    def low_level(self) -> int:
        return -(2 ** (self.bits - 1)) if self.signed else 0


def clipping_of(q: QuantParams) -> float:
    """Saturation bound implied by the step size and grid."""
    return q.top_level * q.delta


def params_from_clipping(c: float, bits: int, signed: bool = True) -> QuantParams:
    """Inverse of clipping_of: recover the step size from a clipping value."""
    if not (c > 0.0 and np.isfinite(c)):
        raise QtkError(f"clipping value must be positive and finite, got {c}")
    top = 2 ** (bits - 1) if signed else 2**bits - 1
    return QuantParams(delta=c / top, bits=bits, signed=signed)


def quantize_array(x: np.ndarray, q: QuantParams) -> np.ndarray:
    """Quantize a raw float64 array onto the delta-grid (round half to even)."""
    k = np.rint(x / q.delta)
    np.clip(k, q.low_level, q.top_level, out=k)
    return k * q.delta


def quantize(x: Tensor, q: QuantParams) -> Tensor:
    """Snap every element of x onto the quantizer's grid."""
    return Tensor(quantize_array(x.data, q), _trusted=True)


def lp_error(x: Tensor | np.ndarray, q: QuantParams, p: float) -> float:
    """Lp norm of the quantization residual, (sum |Q(x) - x|^p)^(1/p)."""
    if not p > 0:
        raise QtkError(f"norm exponent p must be positive, got {p}")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    resid = np.abs(quantize_array(arr, q) - arr)
    return float(np.sum(resid**p) ** (1.0 / p))

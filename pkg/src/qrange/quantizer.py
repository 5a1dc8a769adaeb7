"""Uniform asymmetric fake quantization.

A grid is built from a requested range ``(q_min, q_max)`` and a bit-width.
The scale is ``width / (2**bits - 1)``; the zero-point is the integer level
closest to ``-q_min / scale`` (clamped to the code range), which shifts the
range just enough for real zero to land on a grid level.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import RandomSource

EPS_WIDTH = 1e-8


class Rounding(str, enum.Enum):
    NEAREST = "nearest"
    STOCHASTIC = "stochastic"


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantRange:
    q_min: float
    q_max: float

    def __post_init__(self):
        if not (math.isfinite(self.q_min) and math.isfinite(self.q_max)):
            raise QuantizationError(f"non-finite range ({self.q_min}, {self.q_max})")
        if self.q_min > self.q_max:
            raise QuantizationError(f"q_min > q_max: ({self.q_min}, {self.q_max})")

    def scaled(self, c: float) -> "QuantRange":
        return QuantRange(c * self.q_min, c * self.q_max)

    def as_tuple(self) -> tuple[float, float]:
        return (self.q_min, self.q_max)


def round_half_away(v):
    """Round to nearest, ties away from zero (scalar or array)."""
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass(frozen=True)
class QuantGrid:
    range: QuantRange
    bits: int
    scale: float
    zero_point: int
    rounding: Rounding = Rounding.NEAREST
    levels: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", (1 << self.bits) - 1)

    @property
    def nudged_min(self) -> float:
        return self.scale * (0 - self.zero_point)

    @property
    def nudged_max(self) -> float:
        return self.scale * (self.levels - self.zero_point)

    def dequantize(self, q):
        return self.scale * (np.asarray(q, dtype=np.float64) - self.zero_point)

    def grid_values(self) -> np.ndarray:
        return self.dequantize(np.arange(self.levels + 1))


def make_grid(rng: QuantRange, bits: int, rounding: Rounding | str = Rounding.NEAREST) -> QuantGrid:
    if not isinstance(bits, (int, np.integer)) or not 2 <= bits <= 16:
        raise QuantizationError(f"bits must be an integer in [2, 16], got {bits!r}")
    if not isinstance(rng, QuantRange):
        rng = QuantRange(*rng)
    rounding = Rounding(rounding)
    lo, hi = rng.q_min, rng.q_max
    if hi - lo < EPS_WIDTH:
        mid = 0.5 * (lo + hi)
        lo, hi = mid - 0.5 * EPS_WIDTH, mid + 0.5 * EPS_WIDTH
    levels = (1 << bits) - 1
    scale = (hi - lo) / levels
    zp = int(round_half_away(-lo / scale))
    zp = min(max(zp, 0), levels)
    return QuantGrid(rng, int(bits), float(scale), zp, rounding)


def stochastic_round(v, rng: RandomSource):
    """``floor(v) + Bernoulli(v - floor(v))``; unbiased. Works on scalars and arrays."""
    v = np.asarray(v, dtype=np.float64)
    fl = np.floor(v)
    u = rng.uniform(v.shape)
    out = fl + (u < (v - fl))
    return int(out) if out.ndim == 0 else out


def quantize_codes(t: np.ndarray, grid: QuantGrid, rng: RandomSource | None = None):
    """Integer codes in ``[0, 2**bits - 1]`` plus the in-range mask used by STE."""
    if grid.rounding is Rounding.STOCHASTIC and rng is None:
        raise QuantizationError("stochastic rounding requires a RandomSource")
    if grid.rounding is Rounding.NEAREST and rng is not None:
        raise QuantizationError("nearest rounding takes no RandomSource")
    v = np.asarray(t, dtype=np.float64) / grid.scale
    r = stochastic_round(v, rng) if grid.rounding is Rounding.STOCHASTIC else round_half_away(v)
    q = r + grid.zero_point
    codes = np.clip(q, 0, grid.levels)
    return codes, _inside(v, grid)


def _inside(v, grid: QuantGrid):
    # saturated iff even the nearest code falls off the code range
    near = v + grid.zero_point
    return (near >= -0.5) & (near < grid.levels + 0.5)


def fake_quantize(t: np.ndarray, grid: QuantGrid, rng: RandomSource | None = None) -> np.ndarray:
    codes, _ = quantize_codes(t, grid, rng)
    dtype = t.dtype if t.dtype in (np.float32, np.float64) else np.float32
    return grid.dequantize(codes).astype(dtype)


def fake_quantize_ste(t: np.ndarray, grid: QuantGrid, rng: RandomSource | None = None):
    """Like :func:`fake_quantize` but also returns the straight-through mask
    and the saturation ratio (fraction of elements clipped to the grid ends)."""
    codes, inside = quantize_codes(t, grid, rng)
    out = grid.dequantize(codes).astype(t.dtype)
    return out, inside, 1.0 - float(inside.mean())


def saturation_ratio(t: np.ndarray, grid: QuantGrid) -> float:
    inside = _inside(np.asarray(t, dtype=np.float64) / grid.scale, grid)
    return 1.0 - float(inside.mean())

"""
Fixed-point formats and arithmetic for the LSTM datapath.

Storage is 8-bit signed two's complement, the MAC accumulates in 16 bits.
All rounding is round-half-to-even and every narrowing operation saturates.

Scalar helpers (``quantize``, ``mac``, ``rescale``, ``lut_apply``) operate on
``FxValue`` objects; the ``*_array`` variants work on numpy arrays of raw
integers and are what the simulators use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


@dataclass(frozen=True)
class FxFormat:
    """Signed Qm.n descriptor: ``total_bits`` wide, ``frac_bits`` after the point."""

    total_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.total_bits not in (8, 16):
            raise ValueError(f"total_bits must be 8 or 16, got {self.total_bits}")
        if not 0 <= self.frac_bits < self.total_bits:
            raise ValueError(
                f"frac_bits must be in [0, {self.total_bits}), got {self.frac_bits}"
            )

    @property
    def signed(self) -> bool:
        return True

    @property
    def int_bits(self) -> int:
        return self.total_bits - 1 - self.frac_bits

    @property
    def min_raw(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def max_raw(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.min_raw * self.lsb

    @property
    def max_value(self) -> float:
        return self.max_raw * self.lsb

    def __str__(self):
        return f"Q{self.int_bits}.{self.frac_bits}/{self.total_bits}b"


Q2_5 = FxFormat(8, 5)
Q1_6 = FxFormat(8, 6)
ACC_11 = FxFormat(16, 11)


@dataclass(frozen=True)
class Formats:
    """The three tensor classes of the datapath.

    ``acc.frac_bits`` must equal ``weight.frac_bits + state.frac_bits`` so a
    weight-times-state product lands on the accumulator grid without shifting.
    """

    state: FxFormat = Q2_5
    weight: FxFormat = Q1_6
    acc: FxFormat = ACC_11

    def __post_init__(self):
        if self.state.total_bits != 8 or self.weight.total_bits != 8:
            raise ValueError("state and weight formats must be 8-bit")
        if self.acc.total_bits != 16:
            raise ValueError("accumulator format must be 16-bit")
        if self.acc.frac_bits != self.weight.frac_bits + self.state.frac_bits:
            raise ValueError(
                "accumulator frac_bits must equal weight.frac_bits + state.frac_bits "
                f"({self.acc.frac_bits} != {self.weight.frac_bits} + {self.state.frac_bits})"
            )
        if 2 * self.state.frac_bits > 15:
            raise ValueError("state x state products must fit 16 bits")

    @property
    def bias_shift(self) -> int:
        """Left shift that moves a weight-format value onto the accumulator grid."""
        return self.acc.frac_bits - self.weight.frac_bits

    @property
    def product_fmt(self) -> FxFormat:
        """Format of an element-wise state x state product."""
        return FxFormat(16, 2 * self.state.frac_bits)

    @classmethod
    def with_state_frac(cls, frac: int, weight_frac: int = 6) -> "Formats":
        return cls(
            state=FxFormat(8, frac),
            weight=FxFormat(8, weight_frac),
            acc=FxFormat(16, frac + weight_frac),
        )


DEFAULT_FORMATS = Formats()


@dataclass(frozen=True)
class FxValue:
    """A raw fixed-point scalar bound to its format."""

    raw: int
    fmt: FxFormat

    def __post_init__(self):
        if not self.fmt.min_raw <= self.raw <= self.fmt.max_raw:
            raise ValueError(f"raw {self.raw} out of range for {self.fmt}")

    @property
    def value(self) -> float:
        return self.raw * self.fmt.lsb

    def __float__(self):
        return self.value


class Fx8(FxValue):
    def __post_init__(self):
        if self.fmt.total_bits != 8:
            raise ValueError("Fx8 requires an 8-bit format")
        super().__post_init__()


class Acc16(FxValue):
    def __post_init__(self):
        if self.fmt.total_bits != 16:
            raise ValueError("Acc16 requires a 16-bit format")
        super().__post_init__()


def _wrap(raw: int, fmt: FxFormat) -> FxValue:
    cls = Fx8 if fmt.total_bits == 8 else Acc16
    return cls(int(raw), fmt)


def saturate(raw: int, fmt: FxFormat) -> int:
    return max(fmt.min_raw, min(fmt.max_raw, raw))


def quantize(x: float, fmt: FxFormat) -> FxValue:
    """Round ``x`` to the nearest representable value (ties to even), saturating."""
    if math.isnan(x):
        raise ValueError("cannot quantize NaN")
    scaled = x * (1 << fmt.frac_bits)
    if math.isinf(scaled):
        return _wrap(fmt.max_raw if x > 0 else fmt.min_raw, fmt)
    # round() on a Python float is round-half-to-even
    return _wrap(saturate(round(scaled), fmt), fmt)


def dequantize(v: FxValue) -> float:
    return v.value


def mac(acc: Acc16, a: Fx8, b: Fx8) -> Acc16:
    """acc + a*b, saturated to 16 bits."""
    if acc.fmt.frac_bits != a.fmt.frac_bits + b.fmt.frac_bits:
        raise ValueError(
            f"format mismatch: acc frac {acc.fmt.frac_bits} != "
            f"{a.fmt.frac_bits} + {b.fmt.frac_bits}"
        )
    return Acc16(saturate(acc.raw + a.raw * b.raw, acc.fmt), acc.fmt)


def shift_round_half_even(raw: int, shift: int) -> int:
    """Arithmetic right shift of an integer with round-half-to-even."""
    if shift < 0:
        raise ValueError("negative shift")
    if shift == 0:
        return raw
    q = raw >> shift
    r = raw - (q << shift)
    half = 1 << (shift - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


def rescale(acc: FxValue, out_fmt: FxFormat) -> FxValue:
    """Narrow ``acc`` to ``out_fmt`` (round half even, then saturate)."""
    shift = acc.fmt.frac_bits - out_fmt.frac_bits
    if shift < 0:
        raise ValueError("rescale cannot increase fractional precision")
    return _wrap(saturate(shift_round_half_even(acc.raw, shift), out_fmt), out_fmt)


def sat_add(a: FxValue, b: FxValue) -> FxValue:
    if a.fmt != b.fmt:
        raise ValueError("sat_add operands must share a format")
    return _wrap(saturate(a.raw + b.raw, a.fmt), a.fmt)


# ---------------------------------------------------------------------------
# array helpers (raw integer numpy arrays)
# ---------------------------------------------------------------------------


def quantize_array(x, fmt: FxFormat) -> tuple[np.ndarray, int]:
    """Vectorised ``quantize``. Returns the raw array and the saturation count."""
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("cannot quantize NaN")
    scaled = np.rint(x * (1 << fmt.frac_bits))  # rint rounds half to even
    n_sat = int(np.count_nonzero((scaled > fmt.max_raw) | (scaled < fmt.min_raw)))
    raw = np.clip(scaled, fmt.min_raw, fmt.max_raw)
    dtype = np.int8 if fmt.total_bits == 8 else np.int16
    return raw.astype(dtype), n_sat


def dequantize_array(raw, fmt: FxFormat) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) * fmt.lsb


def sat_array(raw, fmt: FxFormat) -> np.ndarray:
    return np.clip(np.asarray(raw, dtype=np.int64), fmt.min_raw, fmt.max_raw)


def rescale_array(raw, shift: int, out_fmt: FxFormat) -> np.ndarray:
    """Vectorised ``rescale``; returns int8 for 8-bit outputs, int32 otherwise."""
    v = np.asarray(raw, dtype=np.int64)
    if shift < 0:
        raise ValueError("negative shift")
    if shift:
        q = v >> shift
        r = v - (q << shift)
        half = 1 << (shift - 1)
        q = q + ((r > half) | ((r == half) & ((q & 1) == 1)))
    else:
        q = v
    q = np.clip(q, out_fmt.min_raw, out_fmt.max_raw)
    return q.astype(np.int8 if out_fmt.total_bits == 8 else np.int32)


# ---------------------------------------------------------------------------
# activation lookup tables
# ---------------------------------------------------------------------------


class LutKind(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


_FUNCS = {LutKind.SIGMOID: _sigmoid, LutKind.TANH: math.tanh}


@dataclass(frozen=True)
class ActLut:
    """256-entry table indexed by the raw bits (``raw & 0xFF``) of an 8-bit input."""

    kind: LutKind
    in_fmt: FxFormat
    out_fmt: FxFormat
    entries: np.ndarray = field(repr=False)

    def __getitem__(self, raw: int) -> int:
        return int(self.entries[raw & 0xFF])

    def apply_array(self, raw: np.ndarray) -> np.ndarray:
        idx = np.asarray(raw).astype(np.int64) & 0xFF
        return self.entries[idx]


def build_lut(kind, in_fmt: FxFormat = Q2_5, out_fmt: FxFormat = Q2_5) -> ActLut:
    kind = LutKind(kind)
    if in_fmt.total_bits != 8 or out_fmt.total_bits != 8:
        raise ValueError("LUT formats must be 8-bit")
    f = _FUNCS[kind]
    entries = np.zeros(256, dtype=np.int8)
    for raw in range(in_fmt.min_raw, in_fmt.max_raw + 1):
        entries[raw & 0xFF] = quantize(f(raw * in_fmt.lsb), out_fmt).raw
    entries.setflags(write=False)
    return ActLut(kind, in_fmt, out_fmt, entries)


def lut_apply(lut: ActLut, x: Fx8) -> Fx8:
    if x.fmt != lut.in_fmt:
        raise ValueError(f"LUT expects {lut.in_fmt}, got {x.fmt}")
    return Fx8(lut[x.raw], lut.out_fmt)


@dataclass(frozen=True)
class LutPair:
    sigmoid: ActLut
    tanh: ActLut

    @classmethod
    def for_formats(cls, formats: Formats = DEFAULT_FORMATS) -> "LutPair":
        return _lut_pair(formats.state)


_LUT_CACHE: dict[FxFormat, LutPair] = {}


def _lut_pair(fmt: FxFormat) -> LutPair:
    pair = _LUT_CACHE.get(fmt)
    if pair is None:
        pair = LutPair(build_lut("sigmoid", fmt, fmt), build_lut("tanh", fmt, fmt))
        _LUT_CACHE[fmt] = pair
    return pair

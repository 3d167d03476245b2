"""Signed complex fixed-point arithmetic.

Values are stored as scaled integers (``value * 2**fraction_bits``).  Every
operation rounds to nearest and saturates to the representable range; there
is no wraparound.  Quantization of real inputs breaks ties away from zero,
products break ties to even (convergent rounding).

The integer kernels (:func:`round_shift`, :func:`round_shift_even`, :func:`saturate`,
:func:`quantize_int`) accept either Python ints or numpy ``int64`` arrays so the
scalar :class:`CFix` type and the batched detector share one definition of the
arithmetic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "QFormat",
    "CFix",
    "Q16",
    "fx_quantize",
    "fx_add",
    "fx_sub",
    "fx_mul",
    "fx_to_real",
    "round_shift",
    "round_shift_even",
    "saturate",
    "quantize_int",
]

_FMT_RE = re.compile(r"^s(\d+)\.(\d+)\.(\d+)$")


@dataclass(frozen=True)
class QFormat:
    """Signed Q-format with one sign bit.

    ``QFormat(7, 8)`` is the 16-bit ``s1.7.8`` format: range
    ``[-128, 128 - 2**-8]`` with resolution ``2**-8``.
    """

    integer_bits: int = 7
    fraction_bits: int = 8

    def __post_init__(self):
        if self.integer_bits < 0 or self.fraction_bits < 0:
            raise ValueError("bit counts must be non-negative")
        if self.total_bits > 63:
            raise ValueError("word length above 63 bits is not supported")

    @property
    def total_bits(self) -> int:
        return 1 + self.integer_bits + self.fraction_bits

    @property
    def scale(self) -> int:
        return 1 << self.fraction_bits

    @property
    def min_int(self) -> int:
        return -(1 << (self.integer_bits + self.fraction_bits))

    @property
    def max_int(self) -> int:
        return (1 << (self.integer_bits + self.fraction_bits)) - 1

    @property
    def min_value(self) -> float:
        return self.min_int / self.scale

    @property
    def max_value(self) -> float:
        return self.max_int / self.scale

    @property
    def resolution(self) -> float:
        return 1.0 / self.scale

    @classmethod
    def parse(cls, text: str) -> "QFormat":
        """Parse the ``"sN.I.F"`` notation, e.g. ``"s1.7.8"``."""
        m = _FMT_RE.match(text.strip())
        if m is None:
            raise ValueError(f"bad Q-format string {text!r}, expected 'sN.I.F'")
        sign, integer, fraction = (int(g) for g in m.groups())
        if sign != 1:
            raise ValueError(f"exactly one sign bit is supported, got {sign}")
        return cls(integer, fraction)

    def __str__(self) -> str:
        return f"s1.{self.integer_bits}.{self.fraction_bits}"


Q16 = QFormat(7, 8)


def saturate(v, fmt: QFormat):
    """Clamp scaled integer(s) into the range of ``fmt``."""
    if isinstance(v, np.ndarray):
        return np.clip(v, fmt.min_int, fmt.max_int)
    return min(max(v, fmt.min_int), fmt.max_int)


def round_shift(p, shift: int):
    """Divide scaled integer(s) by ``2**shift``, rounding ties away from zero."""
    if shift == 0:
        return p
    half = 1 << (shift - 1)
    if isinstance(p, np.ndarray):
        mag = (np.abs(p) + half) >> shift
        return np.where(p < 0, -mag, mag)
    mag = (abs(p) + half) >> shift
    return -mag if p < 0 else mag


def round_shift_even(p, shift: int):
    """Divide scaled integer(s) by ``2**shift``, rounding ties to even."""
    if shift == 0:
        return p
    half = 1 << (shift - 1)
    q = p >> shift
    rem = p - (q << shift)
    if isinstance(p, np.ndarray):
        return q + ((rem > half) | ((rem == half) & (q & 1 == 1)))
    return q + (rem > half or (rem == half and q & 1 == 1))


def quantize_int(x, fmt: QFormat):
    """Scaled integer nearest to real ``x`` (ties away from zero), saturated."""
    if isinstance(x, np.ndarray):
        v = np.abs(x) * fmt.scale
        # clip before the integer cast so huge inputs cannot overflow int64
        v = np.minimum(v, float(fmt.max_int) + 1.0)
        mag = np.floor(v + 0.5).astype(np.int64)
        return saturate(np.where(x < 0, -mag, mag), fmt)
    v = abs(float(x)) * fmt.scale
    v = min(v, float(fmt.max_int) + 1.0)
    mag = int(np.floor(v + 0.5))
    return saturate(-mag if x < 0 else mag, fmt)


@dataclass(frozen=True)
class CFix:
    """Complex fixed-point value; ``re`` and ``im`` are scaled integers."""

    re: int
    im: int
    fmt: QFormat = Q16

    def __post_init__(self):
        for part in (self.re, self.im):
            if not self.fmt.min_int <= part <= self.fmt.max_int:
                raise ValueError(f"component {part} outside {self.fmt}")

    def __add__(self, other: "CFix") -> "CFix":
        return fx_add(self, other)

    def __sub__(self, other: "CFix") -> "CFix":
        return fx_sub(self, other)

    def __mul__(self, other: "CFix") -> "CFix":
        return fx_mul(self, other)

    def conj(self) -> "CFix":
        return CFix(self.re, saturate(-self.im, self.fmt), self.fmt)

    def __complex__(self) -> complex:
        return fx_to_real(self)


def _check_fmt(a: CFix, b: CFix) -> None:
    if a.fmt != b.fmt:
        raise TypeError(f"format mismatch: {a.fmt} vs {b.fmt}")


def fx_quantize(x: complex, fmt: QFormat = Q16) -> CFix:
    """Round a real or complex number into ``fmt``; out-of-range inputs saturate."""
    x = complex(x)
    return CFix(quantize_int(x.real, fmt), quantize_int(x.imag, fmt), fmt)


def fx_add(a: CFix, b: CFix) -> CFix:
    _check_fmt(a, b)
    return CFix(saturate(a.re + b.re, a.fmt), saturate(a.im + b.im, a.fmt), a.fmt)


def fx_sub(a: CFix, b: CFix) -> CFix:
    _check_fmt(a, b)
    return CFix(saturate(a.re - b.re, a.fmt), saturate(a.im - b.im, a.fmt), a.fmt)


def fx_mul(a: CFix, b: CFix) -> CFix:
    """Complex product at full precision, rounded once per component (ties to
    even), saturated."""
    _check_fmt(a, b)
    f = a.fmt.fraction_bits
    re = a.re * b.re - a.im * b.im
    im = a.re * b.im + a.im * b.re
    return CFix(
        saturate(round_shift_even(re, f), a.fmt),
        saturate(round_shift_even(im, f), a.fmt),
        a.fmt,
    )


def fx_to_real(a: CFix) -> complex:
    # dyadic rationals with <= 53 significant bits convert exactly
    return complex(a.re / a.fmt.scale, a.im / a.fmt.scale)

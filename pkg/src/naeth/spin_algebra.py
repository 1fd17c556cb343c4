"""Exact and asymptotic Clebsch-Gordan coefficients for SU(2) coupling.

``<s, m | s', m'; k, q>`` denotes the amplitude coupling the product state
``|s', m'> (x) |k, q>`` to total spin ``|s, m>``, in the Condon-Shortley
phase convention.  Exact values are carried as ``sign * sqrt(rational)``
with arbitrary-precision rationals, so selection-rule zeros and the parity
cancellations exploited by the anomaly experiments are exact rather than
floating-point artifacts.

The closed-form evaluation uses the factorial-sum representation; outside
its stated domain (m >= 0, s' > k) the argument is first reduced by the
standard magnetic-negation and exchange symmetries.  The large-spin
approximation keeps only the dominant term of the factorial sum and is
meant for the regime s >> 1, s - m << s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

from .errors import ConsistencyError, ValidationError

__all__ = [
    "HalfInteger",
    "ExactScalar",
    "CGKey",
    "CGAsymptotic",
    "cg_exact",
    "cg_value",
    "cg_asymptotic",
    "cg_symmetry",
    "wigner_eckart_assemble",
]


@dataclass(frozen=True, order=True)
class HalfInteger:
    """A spin or magnetic quantum number, stored as twice its value."""

    twice_value: int

    @classmethod
    def coerce(cls, x) -> "HalfInteger":
        """Build from a HalfInteger, int, Fraction, float, or '3/2' string."""
        if isinstance(x, HalfInteger):
            return x
        if isinstance(x, bool):
            raise ValidationError(f"not a half-integer: {x!r}")
        if isinstance(x, int):
            return cls(2 * x)
        if isinstance(x, Fraction):
            if x.denominator not in (1, 2):
                raise ValidationError(f"not a half-integer: {x}")
            return cls(int(2 * x))
        if isinstance(x, float):
            twice = 2.0 * x
            if twice != round(twice):
                raise ValidationError(f"not a half-integer: {x}")
            return cls(int(round(twice)))
        if isinstance(x, str):
            try:
                return cls.coerce(Fraction(x.strip()))
            except (ValueError, ZeroDivisionError) as exc:
                raise ValidationError(f"cannot parse half-integer {x!r}") from exc
        raise ValidationError(f"cannot interpret {x!r} as a half-integer")

    @property
    def value(self) -> float:
        return self.twice_value / 2.0

    @property
    def is_integer(self) -> bool:
        return self.twice_value % 2 == 0

    def __add__(self, other):
        return HalfInteger(self.twice_value + HalfInteger.coerce(other).twice_value)

    def __sub__(self, other):
        return HalfInteger(self.twice_value - HalfInteger.coerce(other).twice_value)

    def __neg__(self):
        return HalfInteger(-self.twice_value)

    def __abs__(self):
        return HalfInteger(abs(self.twice_value))

    def __float__(self):
        return self.value

    def __str__(self):
        if self.twice_value % 2 == 0:
            return str(self.twice_value // 2)
        return f"{self.twice_value}/2"


def valid_magnetic_pair(s: HalfInteger, m: HalfInteger) -> bool:
    """True iff m is a legal magnetic number for magnitude s."""
    return (
        s.twice_value >= 0
        and abs(m.twice_value) <= s.twice_value
        and (s.twice_value - m.twice_value) % 2 == 0
    )


@dataclass(frozen=True)
class ExactScalar:
    """Exact carrier for values of the form sign * sqrt(rational_square)."""

    sign: int
    rational_square: Fraction

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ValidationError(f"sign must be -1, 0 or +1, got {self.sign}")
        if self.rational_square < 0:
            raise ValidationError("rational_square must be nonnegative")
        if (self.sign == 0) != (self.rational_square == 0):
            raise ValidationError("sign is 0 iff rational_square is 0")

    @classmethod
    def zero(cls) -> "ExactScalar":
        return cls(0, Fraction(0))

    @classmethod
    def one(cls) -> "ExactScalar":
        return cls(1, Fraction(1))

    @classmethod
    def from_sqrt(cls, radicand: Fraction, multiplier: Fraction = Fraction(1)) -> "ExactScalar":
        """Exact value ``multiplier * sqrt(radicand)`` (radicand >= 0)."""
        if radicand < 0:
            raise ValidationError("radicand must be nonnegative")
        if multiplier == 0 or radicand == 0:
            return cls.zero()
        sign = 1 if multiplier > 0 else -1
        return cls(sign, radicand * multiplier * multiplier)

    @property
    def is_zero(self) -> bool:
        return self.sign == 0

    def __mul__(self, other):
        if isinstance(other, ExactScalar):
            return ExactScalar(self.sign * other.sign, self.rational_square * other.rational_square)
        if isinstance(other, int):
            if other == 0:
                return ExactScalar.zero()
            s = 1 if other > 0 else -1
            return ExactScalar(self.sign * s, self.rational_square * other * other)
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return ExactScalar(-self.sign, self.rational_square)

    def __float__(self):
        # Round the rational to the nearest double first, then take the
        # square root: one rounding per step, at most 1 ulp past the root.
        return self.sign * math.sqrt(float(self.rational_square))

    def to_float(self) -> float:
        return float(self)


@dataclass(frozen=True)
class CGKey:
    """Arguments of the coupling amplitude <s, m | s', m'; k, q>."""

    s: HalfInteger
    m: HalfInteger
    s_prime: HalfInteger
    m_prime: HalfInteger
    k: HalfInteger
    q: HalfInteger

    def __post_init__(self):
        for mag, mag_name, proj, proj_name in (
            (self.s, "s", self.m, "m"),
            (self.s_prime, "s'", self.m_prime, "m'"),
            (self.k, "k", self.q, "q"),
        ):
            if mag.twice_value < 0:
                raise ValidationError(f"{mag_name} must be nonnegative, got {mag}")
            if not valid_magnetic_pair(mag, proj):
                raise ValidationError(
                    f"invalid pair {proj_name}={proj} for {mag_name}={mag}"
                )

    @classmethod
    def of(cls, s, m, s_prime, m_prime, k, q) -> "CGKey":
        c = HalfInteger.coerce
        return cls(c(s), c(m), c(s_prime), c(m_prime), c(k), c(q))


def _formula_tw(ts: int, tm: int, tsp: int, tmp: int, tk: int, tq: int):
    """Factorial-sum evaluation on twice-valued arguments.

    Assumes the selection rules (m = m' + q, parity, triangle) already
    hold.  Returns (sign, rational_square).
    """
    f = math.factorial
    a1 = (ts + tsp - tk) // 2
    a2 = (ts - tsp + tk) // 2
    a3 = (tsp + tk - ts) // 2
    square = Fraction(
        (ts + 1)
        * f(a1) * f(a2) * f(a3)
        * f((ts + tm) // 2) * f((ts - tm) // 2)
        * f((tsp - tmp) // 2) * f((tsp + tmp) // 2)
        * f((tk - tq) // 2) * f((tk + tq) // 2),
        f((ts + tsp + tk) // 2 + 1),
    )
    lo = max(0, -((ts - tk + tmp) // 2), -((ts - tsp - tq) // 2))
    hi = min(a3, (tsp - tmp) // 2, (tk + tq) // 2)
    total = Fraction(0)
    for ell in range(lo, hi + 1):
        denom = (
            f(ell)
            * f(a3 - ell)
            * f((tsp - tmp) // 2 - ell)
            * f((tk + tq) // 2 - ell)
            * f((ts - tk + tmp) // 2 + ell)
            * f((ts - tsp - tq) // 2 + ell)
        )
        total += Fraction(-1 if ell % 2 else 1, denom)
    if total == 0:
        return 0, Fraction(0)
    sign = 1 if total > 0 else -1
    return sign, square * total * total


@lru_cache(maxsize=None)
def _cg_exact_tw(ts: int, tm: int, tsp: int, tmp: int, tk: int, tq: int):
    """Exact coefficient on twice-valued arguments; returns (sign, square)."""
    if tm != tmp + tq:
        return 0, Fraction(0)
    if (ts + tsp + tk) % 2 != 0:
        return 0, Fraction(0)
    if not abs(tsp - tk) <= ts <= tsp + tk:
        return 0, Fraction(0)
    phase = 1
    # The closed form is quoted for m >= 0 and s' > k; fold other arguments
    # into that region with the standard symmetries before evaluating.
    if tm < 0:
        tm, tmp, tq = -tm, -tmp, -tq
        phase *= -1 if ((tsp + tk - ts) // 2) % 2 else 1
    if tsp < tk:
        tsp, tmp, tk, tq = tk, tq, tsp, tmp
        phase *= -1 if ((tsp + tk - ts) // 2) % 2 else 1
    sign, square = _formula_tw(ts, tm, tsp, tmp, tk, tq)
    return sign * phase, square


def cg_exact(key: CGKey) -> ExactScalar:
    """Exact <s, m | s', m'; k, q>; exact zero when a selection rule fails."""
    sign, square = _cg_exact_tw(
        key.s.twice_value,
        key.m.twice_value,
        key.s_prime.twice_value,
        key.m_prime.twice_value,
        key.k.twice_value,
        key.q.twice_value,
    )
    return ExactScalar(sign, square)


@lru_cache(maxsize=1 << 20)
def _cg_float_tw(ts: int, tm: int, tsp: int, tmp: int, tk: int, tq: int) -> float:
    sign, square = _cg_exact_tw(ts, tm, tsp, tmp, tk, tq)
    return sign * math.sqrt(float(square))


def cg_value(s, m, s_prime, m_prime, k, q) -> float:
    """Floating-point coupling coefficient (validates its arguments)."""
    key = CGKey.of(s, m, s_prime, m_prime, k, q)
    return _cg_float_tw(
        key.s.twice_value,
        key.m.twice_value,
        key.s_prime.twice_value,
        key.m_prime.twice_value,
        key.k.twice_value,
        key.q.twice_value,
    )


@dataclass(frozen=True)
class CGAsymptotic:
    """Leading-order coefficient with its accuracy bookkeeping.

    ``error_estimate`` is the expansion parameter (s - m)/s; the warning
    flags calls outside the regime s - m <= s/2 where the truncation is
    uncontrolled.
    """

    value: float
    error_estimate: float
    regime_warning: bool


def cg_asymptotic(s, m, k, q) -> CGAsymptotic:
    """Leading-order approximation to <s, m+q | s, m; k, q> at large s.

    Keeps only the dominant term of the factorial sum (the lowest allowed
    summation index), with the remainder entering at relative order
    (s - m)/s.
    """
    s = HalfInteger.coerce(s)
    m = HalfInteger.coerce(m)
    k = HalfInteger.coerce(k)
    q = HalfInteger.coerce(q)
    if not valid_magnetic_pair(s, m):
        raise ValidationError(f"invalid pair m={m} for s={s}")
    if not (k.is_integer and q.is_integer):
        raise ValidationError("tensor rank k and component q must be integers")
    if s.twice_value < 2:
        raise ValidationError("asymptotic form requires s >= 1")
    if abs(q.twice_value) > k.twice_value or k.twice_value > s.twice_value:
        raise ValidationError("require |q| <= k <= s")

    delta = (s.twice_value - m.twice_value) // 2  # s - m, a nonnegative integer
    sv = s.value
    kv = k.twice_value // 2
    qv = q.twice_value // 2
    warn = delta > sv / 2.0
    err = delta / sv

    if qv >= 0:
        if m.twice_value + q.twice_value > s.twice_value:
            # m + q beyond the top of the ladder: the true coefficient is 0.
            return CGAsymptotic(0.0, err, warn)
        ratio = Fraction(
            math.factorial(delta) * math.factorial(kv + qv),
            math.factorial(delta - qv) * math.factorial(kv - qv),
        )
        value = (-1.0) ** qv / (
            math.factorial(qv) * (2.0 * sv) ** (qv / 2.0)
        ) * math.sqrt(float(ratio))
    else:
        aq = -qv
        ratio = Fraction(
            math.factorial(delta + aq) * math.factorial(kv + aq),
            math.factorial(delta) * math.factorial(kv - aq),
        )
        value = math.sqrt(float(ratio)) / (
            math.factorial(aq) * (2.0 * sv) ** (aq / 2.0)
        )
    return CGAsymptotic(value, err, warn)


def cg_symmetry(s, m, k) -> tuple[ExactScalar, ExactScalar]:
    """The q = 1 pair (<s,m+1|s,m;k,1>, <s,-m|s,-m-1;k,1>).

    Asserts the exact relation first = (-1)^(k+1) * second before
    returning.
    """
    s = HalfInteger.coerce(s)
    m = HalfInteger.coerce(m)
    k = HalfInteger.coerce(k)
    if not k.is_integer or k.twice_value < 2:
        raise ValidationError("symmetry relation requires integer k >= 1")
    if not valid_magnetic_pair(s, m) or m.twice_value + 2 > s.twice_value:
        raise ValidationError(f"need -s <= m <= s - 1, got m={m}, s={s}")
    one = HalfInteger(2)
    first = cg_exact(CGKey(s, m + one, s, m, k, one))
    second = cg_exact(CGKey(s, -m, s, -m - one, k, one))
    phase = -1 if (k.twice_value // 2 + 1) % 2 else 1
    if first != phase * second:
        raise ConsistencyError(
            f"symmetry relation violated at s={s}, m={m}, k={k}: "
            f"{first} vs (-1)^(k+1) * {second}"
        )
    return first, second


def wigner_eckart_assemble(reduced: float, key: CGKey) -> float:
    """Full matrix element <a,m|T^(k)_q|a',m'> from its reduced element."""
    if reduced == 0:
        return 0.0
    return reduced * float(cg_exact(key))

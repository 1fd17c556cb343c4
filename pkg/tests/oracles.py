"""Independent oracles used by the test suite.

The coupling-coefficient oracle below never touches the package's
closed-form evaluation: it builds every coupled multiplet by exact
ladder-operator recursion from the stretched state, carrying coefficients
as (sign, rational-square) pairs with its own arithmetic. Sums of two
sqrt-rationals stay in that field here because every intermediate
coefficient is itself a coupling coefficient.
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from math import isqrt

ZERO = (0, Fraction(0))


def _sqrt_fraction(r: Fraction):
    """Exact sqrt of a Fraction if it is a perfect square, else None."""
    num, den = r.numerator, r.denominator
    sn, sd = isqrt(num), isqrt(den)
    if sn * sn != num or sd * sd != den:
        return None
    return Fraction(sn, sd)


def srr_scale_sqrt(x, n: Fraction):
    """Multiply sign*sqrt(r) by sqrt(n), n >= 0."""
    sign, r = x
    if sign == 0 or n == 0:
        return ZERO
    return (sign, r * n)


def srr_add(x, y):
    """Exact sum of two sign*sqrt(r) values (their product must be square)."""
    sx, rx = x
    sy, ry = y
    if sx == 0:
        return y
    if sy == 0:
        return x
    cross = _sqrt_fraction(rx * ry)
    assert cross is not None, "sum left the sqrt-rational field"
    square = rx + ry + 2 * sx * sy * cross
    if square == 0:
        return ZERO
    if rx > ry:
        sign = sx
    elif ry > rx:
        sign = sy
    else:
        sign = sx  # equal radicands with equal signs (else square == 0)
    return (sign, square)


def _raise_factor(tj: int, tm: int) -> Fraction:
    # (j - m)(j + m + 1) with twice-valued arguments
    return Fraction((tj - tm) * (tj + tm + 2), 4)


def _lower_factor(tj: int, tm: int) -> Fraction:
    # (j + m)(j - m + 1)
    return Fraction((tj + tm) * (tj - tm + 2), 4)


@lru_cache(maxsize=None)
def coupled_states(tj1: int, tj2: int):
    """All coupled states of j1 (x) j2 by exact ladder recursion.

    Returns {(tS, tM): {(tm1, tm2): (sign, rational_square)}}.
    """
    states = {}
    for ts in range(tj1 + tj2, abs(tj1 - tj2) - 1, -2):
        # Highest-weight state from the raising-operator null condition.
        coeffs = {}
        m1_hi = min(tj1, ts + tj2)
        m1_lo = max(-tj1, ts - tj2)
        coeffs[(m1_hi, ts - m1_hi)] = (1, Fraction(1))
        for tm1 in range(m1_hi - 2, m1_lo - 2, -2):
            prev = coeffs[(tm1 + 2, ts - tm1 - 2)]
            ratio = _raise_factor(tj2, ts - tm1 - 2) / _raise_factor(tj1, tm1)
            sign, r = prev
            coeffs[(tm1, ts - tm1)] = (-sign, r * ratio)
        norm2 = sum(r for _, r in coeffs.values())
        top_sign = coeffs[(m1_hi, ts - m1_hi)][0]
        coeffs = {
            key: (sign * top_sign, r / norm2) for key, (sign, r) in coeffs.items()
        }
        states[(ts, ts)] = coeffs
        # Walk down the multiplet with the total lowering operator.
        for tm in range(ts, -ts + 1, -2):
            cur = states[(ts, tm)]
            nxt = {}
            denom = _lower_factor(ts, tm)
            for (tm1, tm2), c in cur.items():
                if tm1 > -tj1:
                    contrib = srr_scale_sqrt(c, _lower_factor(tj1, tm1) / denom)
                    key = (tm1 - 2, tm2)
                    nxt[key] = srr_add(nxt.get(key, ZERO), contrib)
                if tm2 > -tj2:
                    contrib = srr_scale_sqrt(c, _lower_factor(tj2, tm2) / denom)
                    key = (tm1, tm2 - 2)
                    nxt[key] = srr_add(nxt.get(key, ZERO), contrib)
            states[(ts, tm - 2)] = {k: v for k, v in nxt.items() if v[0] != 0}
    return states


def cg_oracle_tw(ts: int, tm: int, tsp: int, tmp: int, tk: int, tq: int):
    """Oracle <s, m | s', m'; k, q> as (sign, rational_square)."""
    if tm != tmp + tq or abs(tm) > ts:
        return ZERO
    if (ts + tsp + tk) % 2 != 0 or not abs(tsp - tk) <= ts <= tsp + tk:
        return ZERO
    return coupled_states(tsp, tk).get((ts, tm), {}).get((tmp, tq), ZERO)


def multiplet_counts(n_sites: int) -> dict[int, int]:
    """{twice_spin: multiplet count} for n_sites coupled spin-1/2 sites."""
    counts = {1: 1}
    for _ in range(n_sites - 1):
        nxt: dict[int, int] = {}
        for ts, c in counts.items():
            for ts_new in ({ts + 1} if ts == 0 else {ts - 1, ts + 1}):
                nxt[ts_new] = nxt.get(ts_new, 0) + c
        counts = nxt
    return counts


def iter_valid_keys(max_twice: int):
    """All valid twice-valued keys with s, s', k <= max_twice / 2."""
    for tsp in range(0, max_twice + 1):
        for tk in range(0, max_twice + 1):
            for ts in range(abs(tsp - tk), min(tsp + tk, max_twice) + 1, 2):
                for tmp in range(-tsp, tsp + 1, 2):
                    for tq in range(-tk, tk + 1, 2):
                        tm = tmp + tq
                        if abs(tm) <= ts:
                            yield ts, tm, tsp, tmp, tk, tq

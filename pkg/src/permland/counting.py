"""Counting permutation points relative to global minima.

A K-th order permutation point in a layer of width n maps the n neuron
slots onto n - K distinct parameter vectors, every vector being used at
least once. Relative to the n! reorderings of a generic minimum this gives
the ratio T(K, n) = surj(n, n - K) / n!.

All ratios are exact ``fractions.Fraction`` values.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

BRUTEFORCE_MAX_N = 9
EXACT_MAX_N = 30


def _check_order(K: int, n: int) -> None:
    if K < 1:
        raise ValueError(f"order K must be >= 1, got {K}")
    if 2 * K > n:
        raise ValueError(f"need 2K <= n, got K={K}, n={n}")


def global_minima_count(widths: Sequence[int]) -> int:
    """Number of equivalent parameter configurations, prod of n_j! over hidden widths.

    Args:
        widths: hidden layer widths n_1..n_{d-1}.
    """
    out = 1
    for n in widths:
        if int(n) < 1:
            raise ValueError(f"widths must be positive, got {n}")
        out *= math.factorial(int(n))
    return out


def surjection_count(n: int, l: int) -> int:
    """Surjective maps from n labeled slots onto l labeled vectors (inclusion-exclusion)."""
    if l < 1 or n < 1:
        raise ValueError("n and l must be >= 1")
    if l > n:
        raise ValueError(f"no surjection from {n} slots onto {l} > {n} vectors")
    return sum((-1) ** j * math.comb(l, j) * (l - j) ** n for j in range(l + 1))


def partitions(n: int, parts: int, max_part: int | None = None) -> Iterator[tuple[int, ...]]:
    """Unordered partitions of n into exactly ``parts`` positive sizes, non-increasing."""
    if max_part is None:
        max_part = n
    if parts == 0:
        if n == 0:
            yield ()
        return
    lo = -(-n // parts)  # the largest part is at least ceil(n/parts)
    for first in range(min(n - parts + 1, max_part), lo - 1, -1):
        for rest in partitions(n - first, parts - 1, first):
            yield (first,) + rest


def surjection_count_partitions(n: int, l: int) -> int:
    """Same count as ``surjection_count``, summed over unordered partitions.

    A partition with sizes s_1..s_l contributes n!/prod(s_i!) slot assignments
    times l!/prod(mult!) ways to attach the labeled vectors to the blocks.
    """
    if l < 1 or l > n:
        raise ValueError(f"need 1 <= l <= n, got n={n}, l={l}")
    total = 0
    for sizes in partitions(n, l):
        slots = math.factorial(n)
        for s in sizes:
            slots //= math.factorial(s)
        labels = math.factorial(l)
        for _, grp in itertools.groupby(sizes):
            labels //= math.factorial(len(list(grp)))
        total += slots * labels
    return total


def ratio_formula(K: int, n: int) -> Fraction:
    """Exact ratio T(K, n) of K-th order permutation points to global minima.

    Orders 1 to 3 use the explicit partition sums; higher orders use
    surj(n, n - K)/n!.
    """
    _check_order(K, n)
    c = math.comb
    f = math.factorial
    if K == 1:
        return Fraction(c(n - 1, 1), 2)
    if K == 2:
        return Fraction(c(n - 2, 1), f(3)) + Fraction(c(n - 2, 2), f(2) ** 2)
    if K == 3:
        return (Fraction(c(n - 3, 1), f(4)) + Fraction(c(n - 3, 2), f(3))
                + Fraction(c(n - 3, 3), f(2) ** 3))
    return Fraction(surjection_count(n, n - K), f(n))


def lower_bound(K: int, n: int) -> Fraction:
    """Lower bound C(n-K, K)/2^K on T(K, n): only pairs are merged."""
    _check_order(K, n)
    return Fraction(math.comb(n - K, K), 2 ** K)


def multilayer_ratio_sum(widths: Sequence[int], K: int) -> Fraction:
    """Sum of ``lower_bound(K, n_k)`` over hidden layers."""
    if not widths:
        raise ValueError("need at least one hidden layer")
    return sum((lower_bound(K, int(n)) for n in widths), Fraction(0))


def limit_constant(K: int) -> float:
    """c_K in C(n-K, K)/2^K ~ c_K n^K, equal to 1/(2^K K!)."""
    return 1.0 / (2 ** K * math.factorial(K))


def printed_limit_constant(K: int) -> float:
    """The constant with an extra e^-K factor; disagrees with the numerics."""
    return limit_constant(K) * math.exp(-K)


def asymptotic_check(K: int, n: int) -> tuple[float, float, float]:
    """Compare the lower bound with its large-n limit n^K/(2^K K!).

    Returns:
        (exact, limit, ratio). The ratio is formed exactly and then rounded;
        ``exact`` and ``limit`` become inf once they leave the float range.
    """
    _check_order(K, n)
    ratio = Fraction(math.comb(n - K, K) * math.factorial(K), n ** K)
    return _to_float(lower_bound(K, n)), _to_float(Fraction(n ** K, 2 ** K * math.factorial(K))), float(ratio)


def _to_float(x: Fraction) -> float:
    try:
        return float(x)
    except OverflowError:
        return math.inf


def enumerate_points_bruteforce(n: int, K: int) -> int:
    """Count maps {1..n} -> {1..n-K} that hit every target, by enumeration.

    All l^n maps are visited. Occupancy bitmasks of the trailing slots are
    built with numpy; the leading slots are looped in Python.
    """
    if n > BRUTEFORCE_MAX_N:
        raise ValueError(f"brute force is limited to n <= {BRUTEFORCE_MAX_N}")
    if K < 0 or n - K < 1:
        raise ValueError(f"need 0 <= K < n, got n={n}, K={K}")
    l = n - K
    full = (1 << l) - 1
    n_tail = min(n, 5)
    tail = np.zeros(1, dtype=np.int64)
    for _ in range(n_tail):
        tail = (tail[:, None] | (np.int64(1) << np.arange(l, dtype=np.int64))[None, :]).ravel()
    count = 0
    for head in itertools.product(range(l), repeat=n - n_tail):
        mask = 0
        for h in head:
            mask |= 1 << h
        count += int(np.count_nonzero((tail | mask) == full))
    return count


def count_table(max_n: int, max_K: int) -> list[dict]:
    """Rows K, n, exact ratio, lower bound and limit for 2K <= n <= max_n."""
    rows = []
    for K in range(1, max_K + 1):
        for n in range(2 * K, max_n + 1):
            t = ratio_formula(K, n)
            b = lower_bound(K, n)
            rows.append({
                "K": K, "n": n,
                "ratio_exact_num": t.numerator, "ratio_exact_den": t.denominator,
                "lower_bound_num": b.numerator, "lower_bound_den": b.denominator,
                "limit_float": n ** K * limit_constant(K),
            })
    return rows

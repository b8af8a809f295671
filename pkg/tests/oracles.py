"""Independent oracles: pure Python, no numpy arithmetic on the values checked."""
from __future__ import annotations

import bisect
import math


def decode_half(bits: int) -> float:
    sign = -1.0 if bits & 0x8000 else 1.0
    exp = (bits >> 10) & 0x1F
    man = bits & 0x3FF
    if exp == 0x1F:
        return sign * math.inf if man == 0 else math.nan
    if exp == 0:
        return sign * math.ldexp(man, -24)
    return sign * math.ldexp(1024 + man, exp - 25)


# non-negative finite halves, ascending with the bit pattern
HALF_POSITIVE = [decode_half(b) for b in range(0x7C00)]
HALF_OVERFLOW = 65520.0  # midpoint above 65504; ties go to the even pattern, i.e. infinity


def round_to_half(x: float) -> float:
    """Nearest binary16 value, ties to even, saturating to infinity."""
    if math.isnan(x):
        return math.nan
    a = abs(x)
    if a >= HALF_OVERFLOW:
        return math.copysign(math.inf, x)
    i = bisect.bisect_left(HALF_POSITIVE, a)
    if i == len(HALF_POSITIVE):
        return math.copysign(HALF_POSITIVE[-1], x)
    if i < len(HALF_POSITIVE) and HALF_POSITIVE[i] == a:
        return math.copysign(a, x)
    lo, hi = HALF_POSITIVE[i - 1], HALF_POSITIVE[i]
    if a - lo < hi - a:
        v = lo
    elif hi - a < a - lo:
        v = hi
    else:
        v = lo if (i - 1) % 2 == 0 else hi
    return math.copysign(v, x)


def triple_loop(alpha, a, b, beta, c, trans_a=False, trans_b=False):
    """Same loop the kernels promise to match, written independently."""
    a, b, c = [list(map(list, m)) for m in (a, b, c)]
    m = len(a[0]) if trans_a else len(a)
    k = len(a) if trans_a else len(a[0])
    n = len(b) if trans_b else len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += (a[p][i] if trans_a else a[i][p]) * (b[j][p] if trans_b else b[p][j])
            out[i][j] = alpha * s + (beta * c[i][j] if beta != 0 else 0.0)
    return out


def ring_transfer_count(blocks_per_worker, worker_count):
    """Brute-force simulation of the ring: count hops until every block has visited every worker."""
    hops = 0
    for origin, nblocks in enumerate(blocks_per_worker):
        for _ in range(nblocks):
            at, seen = origin, {origin}
            while len(seen) < worker_count:
                at = (at + 1) % worker_count
                seen.add(at)
                hops += 1
    return hops

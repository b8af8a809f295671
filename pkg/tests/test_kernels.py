import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridgemm.core import Precision
from gridgemm.kernels import (ConversionReport, PrecisionMismatchError, ShapeError, convert_precision,
                              local_gemm, local_row_col_sums, local_transpose, reference_gemm)
from oracles import HALF_POSITIVE, decode_half, round_to_half, triple_loop

dims = st.integers(1, 7)


@settings(max_examples=60, deadline=None)
@given(dims, dims, dims, st.booleans(), st.booleans(), st.integers(0, 2**31))
def test_local_gemm_bitwise_matches_loop_in_double(m, k, n, ta, tb, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((k, m) if ta else (m, k))
    b = rng.standard_normal((n, k) if tb else (k, n))
    c = rng.standard_normal((m, n))
    want = triple_loop(0.75, a, b, -1.25, c, ta, tb)
    local_gemm(0.75, a, b, -1.25, c, ta, tb)
    assert c.tolist() == want


def test_reference_gemm_agrees_with_independent_loop(rng):
    a, b, c = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    assert reference_gemm(2.0, a, b, 0.5, c) == triple_loop(2.0, a, b, 0.5, c)


def test_beta_zero_never_reads_c():
    a = np.ones((2, 2))
    c = np.full((2, 2), np.nan)
    local_gemm(1.0, a, a, 0.0, c)
    assert np.all(c == 2.0)


def test_half_gemm_widens_to_single():
    a = np.full((1, 2048), 1.0, dtype=np.float16)
    b = np.full((2048, 1), 1.0, dtype=np.float16)
    c = np.zeros((1, 1), dtype=np.float16)
    local_gemm(1.0, a, b, 0.0, c)
    # a half accumulator would stall at 2048 only by luck; single gives the exact count
    assert float(c[0, 0]) == 2048.0


def test_gemm_errors():
    with pytest.raises(ShapeError):
        local_gemm(1.0, np.ones((2, 3)), np.ones((2, 3)), 0.0, np.ones((2, 3)))
    with pytest.raises(PrecisionMismatchError):
        local_gemm(1.0, np.ones((2, 2), np.float32), np.ones((2, 2)), 0.0, np.ones((2, 2)))


def test_half_decoding_matches_numpy_for_all_patterns():
    bits = np.arange(65536, dtype=np.uint16)
    ours = [decode_half(int(b)) for b in bits]
    theirs = bits.view(np.float16).astype(np.float64).tolist()
    for b, x, y in zip(bits.tolist(), ours, theirs):
        assert (math.isnan(x) and math.isnan(y)) or x == y, hex(b)


def test_conversion_rounds_midpoints_to_even():
    # every midpoint between adjacent positive halves, plus the overflow threshold
    mids = [(HALF_POSITIVE[i] + HALF_POSITIVE[i + 1]) / 2 for i in range(len(HALF_POSITIVE) - 1)]
    mids += [65519.0, 65520.0, 1e6]
    got = convert_precision(np.array(mids), Precision.HALF16).astype(np.float64).tolist()
    assert got == [round_to_half(x) for x in mids]


@given(st.floats(allow_nan=False, width=32))
def test_single_to_half_matches_oracle(x):
    got = float(convert_precision(np.array([x], np.float32), Precision.HALF16)[0])
    assert got == round_to_half(float(np.float32(x)))


def test_conversion_report_counts_overflow():
    rep = ConversionReport()
    convert_precision(np.array([1.0, 7e4, -1e5, np.inf]), Precision.HALF16, rep)
    assert rep.converted == 4 and rep.overflowed == 2


@given(st.integers(1, 6), st.integers(1, 6))
def test_double_transpose_is_identity(m, n):
    x = np.arange(m * n, dtype=np.float64).reshape(m, n)
    assert np.array_equal(local_transpose(local_transpose(x)), x)


def test_row_col_sums_left_to_right():
    x = np.array([[1e8, 1.0, -1e8], [1.0, 2.0, 3.0]], dtype=np.float32)
    rows = local_row_col_sums(x, 1)
    # (1e8 + 1) rounds back to 1e8 in single, so the first row sums to 0
    assert rows.tolist() == [0.0, 6.0]
    # spacing of single at 1e8 is 8, so +1 and +3 are both absorbed
    assert local_row_col_sums(x, 0).tolist() == [1e8, 3.0, -1e8]
    with pytest.raises(ValueError):
        local_row_col_sums(x, 2)

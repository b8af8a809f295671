import pytest
from hypothesis import given, strategies as st

from gridgemm.pool import MIN_CLASS, Pool, PoolError, size_class


@given(st.integers(1, 1 << 22))
def test_size_class_is_smallest_power_of_two_at_least_request(n):
    c = size_class(n)
    assert c >= max(n, MIN_CLASS) and c & (c - 1) == 0
    assert c == MIN_CLASS or c // 2 < n


@given(st.lists(st.integers(1, 5000), min_size=1, max_size=30))
def test_release_then_same_sizes_reuse_everything(sizes):
    pool = Pool()
    bufs = [pool.acquire(n) for n in sizes]
    for b in bufs:
        pool.release(b)
    fresh = pool.stats.fresh_allocations
    again = [pool.acquire(n) for n in sizes]
    assert pool.stats.fresh_allocations == fresh
    assert pool.stats.reuses == len(sizes)
    for b in again:
        pool.release(b)
    assert pool.stats.bytes_live == 0


def test_high_water_and_trim():
    pool = Pool()
    a, b = pool.acquire(100), pool.acquire(1000)
    pool.release(a)
    pool.release(b)
    assert pool.stats.high_water == 128 + 1024
    assert pool.trim() == 128 + 1024
    assert pool.stats.bytes_pooled == 0 and pool.stats.bytes_trimmed == 1152


def test_misuse_is_rejected():
    p, q = Pool(0), Pool(1)
    buf = p.acquire(8)
    with pytest.raises(PoolError):
        q.release(buf)
    p.release(buf)
    with pytest.raises(PoolError):
        p.release(buf)
    with pytest.raises(PoolError):
        p.acquire(0)


def test_array_view_is_backed_by_buffer():
    pool = Pool()
    arr, buf = pool.array((3, 4), "float32")
    arr[...] = 1
    assert bytes(buf.raw[:4]) == b"\x00\x00\x80\x3f"
    assert pool.stats.report() == {"fresh": 1, "reused": 0, "high_water_bytes": 64}

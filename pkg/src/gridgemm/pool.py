"""Per-worker block buffer pool with power-of-two size classes."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

MIN_CLASS = 64


class PoolError(RuntimeError):
    pass


def size_class(nbytes: int) -> int:
    if nbytes <= 0:
        raise PoolError(f"cannot allocate {nbytes} bytes")
    return max(MIN_CLASS, 1 << (nbytes - 1).bit_length())


@dataclass
class PoolStats:
    fresh_allocations: int = 0
    reuses: int = 0
    bytes_live: int = 0
    bytes_pooled: int = 0
    high_water: int = 0
    bytes_trimmed: int = 0

    def report(self) -> dict:
        return {"fresh": self.fresh_allocations, "reused": self.reuses,
                "high_water_bytes": self.high_water}


class PoolBuffer:
    __slots__ = ("capacity", "raw", "pool", "live")

    def __init__(self, capacity: int, pool: "Pool"):
        self.capacity = capacity
        self.raw = bytearray(capacity)
        self.pool = pool
        self.live = True

    def view(self, dtype, shape) -> np.ndarray:
        dtype = np.dtype(dtype)
        count = int(np.prod(shape))
        if count * dtype.itemsize > self.capacity:
            raise PoolError("view larger than buffer")
        return np.frombuffer(self.raw, dtype=dtype, count=count).reshape(shape)


class Pool:
    """Recycles buffers instead of freeing them; only ``trim`` gives memory back."""

    def __init__(self, owner: int = 0):
        self.owner = owner
        self.free: dict[int, list[PoolBuffer]] = defaultdict(list)
        self.stats = PoolStats()

    def acquire(self, nbytes: int) -> PoolBuffer:
        cls = size_class(nbytes)
        bucket = self.free.get(cls)
        if bucket:
            buf = bucket.pop()
            buf.live = True
            self.stats.reuses += 1
            self.stats.bytes_pooled -= cls
        else:
            buf = PoolBuffer(cls, self)
            self.stats.fresh_allocations += 1
        self.stats.bytes_live += cls
        self.stats.high_water = max(self.stats.high_water,
                                    self.stats.bytes_live + self.stats.bytes_pooled)
        return buf

    def release(self, buf: PoolBuffer) -> None:
        if buf.pool is not self:
            raise PoolError("buffer belongs to another pool")
        if not buf.live:
            raise PoolError("double release")
        buf.live = False
        self.free[buf.capacity].append(buf)
        self.stats.bytes_live -= buf.capacity
        self.stats.bytes_pooled += buf.capacity

    def trim(self) -> int:
        freed = sum(b.capacity for bucket in self.free.values() for b in bucket)
        self.free.clear()
        self.stats.bytes_pooled -= freed
        self.stats.bytes_trimmed += freed
        return freed

    def array(self, shape, dtype) -> tuple[np.ndarray, PoolBuffer]:
        """Pool-backed uninitialised array; callers must overwrite it fully."""
        dtype = np.dtype(dtype)
        buf = self.acquire(max(1, int(np.prod(shape))) * dtype.itemsize)
        return buf.view(dtype, shape), buf

    def snapshot(self) -> dict:
        return asdict(self.stats)


# functional aliases matching the operation names used elsewhere
def pool_acquire(pool: Pool, nbytes: int) -> PoolBuffer:
    return pool.acquire(nbytes)


def pool_release(pool: Pool, buf: PoolBuffer) -> None:
    pool.release(buf)


def pool_trim(pool: Pool) -> int:
    return pool.trim()

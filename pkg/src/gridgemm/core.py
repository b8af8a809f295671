"""Precisions, block geometry, layouts and matrix descriptors.

Everything here is a plain value type. Workers and the master all hold
copies of the same descriptors, so the canonical text form of a layout
(``kind:gRxgC:bRxbC:W``) doubles as the wire and checkpoint encoding.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

WorkerId = int
Coord = tuple[int, int]

MASTER: WorkerId = -1


class LayoutError(ValueError):
    """A layout is malformed or not usable for the requested operation."""


class Precision(enum.Enum):
    HALF16 = ("half", 2, np.float16)
    SINGLE32 = ("single", 4, np.float32)
    DOUBLE64 = ("double", 8, np.float64)

    def __init__(self, label: str, byte_width: int, dtype):
        self.label = label
        self.byte_width = byte_width
        self.dtype = np.dtype(dtype).newbyteorder("<")

    @property
    def compute_dtype(self) -> np.dtype:
        # binary16 is storage only; arithmetic happens at single precision
        return np.dtype(np.float64) if self is Precision.DOUBLE64 else np.dtype(np.float32)

    @classmethod
    def parse(cls, text: str) -> "Precision":
        for p in cls:
            if text.lower() in (p.label, p.name.lower()):
                return p
        raise ValueError(f"unknown precision {text!r}")

    @classmethod
    def of(cls, dtype) -> "Precision":
        dt = np.dtype(dtype)
        for p in cls:
            if p.dtype.kind == dt.kind and p.byte_width == dt.itemsize:
                return p
        raise ValueError(f"no precision for dtype {dt}")

    def narrower(self, other: "Precision") -> "Precision":
        return self if self.byte_width <= other.byte_width else other


class LayoutKind(enum.Enum):
    ROW_BLOCKS_1D = "rowblocks"
    COL_BLOCKS_1D = "colblocks"
    ROW_CYCLIC_1D = "rowcyclic"
    CHECKERBOARD_2D = "checkerboard"
    CUSTOM = "custom"

    @classmethod
    def parse(cls, text: str) -> "LayoutKind":
        for k in cls:
            if text.lower() in (k.value, k.name.lower()):
                return k
        raise ValueError(f"unknown layout kind {text!r}")


class Provenance(enum.Enum):
    OWNED = "owned"
    CACHED = "cached"
    REPLICA = "replica"
    TRANSIT = "transit"


@dataclass(frozen=True)
class BlockGrid:
    global_rows: int
    global_cols: int
    block_rows: int
    block_cols: int

    def __post_init__(self):
        for name in ("global_rows", "global_cols", "block_rows", "block_cols"):
            if getattr(self, name) < 1:
                raise LayoutError(f"{name} must be positive")

    @property
    def n_block_rows(self) -> int:
        return -(-self.global_rows // self.block_rows)

    @property
    def n_block_cols(self) -> int:
        return -(-self.global_cols // self.block_cols)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.global_rows, self.global_cols)

    def coords(self) -> Iterator[Coord]:
        for i in range(self.n_block_rows):
            for j in range(self.n_block_cols):
                yield (i, j)

    def contains(self, coord: Coord) -> bool:
        i, j = coord
        return 0 <= i < self.n_block_rows and 0 <= j < self.n_block_cols

    def row_range(self, block_row: int) -> tuple[int, int]:
        start = block_row * self.block_rows
        return start, min(start + self.block_rows, self.global_rows)

    def col_range(self, block_col: int) -> tuple[int, int]:
        start = block_col * self.block_cols
        return start, min(start + self.block_cols, self.global_cols)

    def slices(self, coord: Coord) -> tuple[slice, slice]:
        if not self.contains(coord):
            raise LayoutError(f"block {coord} outside {self.n_block_rows}x{self.n_block_cols} grid")
        return slice(*self.row_range(coord[0])), slice(*self.col_range(coord[1]))

    def block_of(self, row: int, col: int) -> Coord:
        return (row // self.block_rows, col // self.block_cols)


def block_extent(grid: BlockGrid, coord: Coord) -> tuple[int, int]:
    """Rows and columns of block ``coord``; boundary blocks are trimmed."""
    if not grid.contains(coord):
        raise LayoutError(f"block {coord} outside {grid.n_block_rows}x{grid.n_block_cols} grid")
    i, j = coord
    return (
        min(grid.block_rows, grid.global_rows - i * grid.block_rows),
        min(grid.block_cols, grid.global_cols - j * grid.block_cols),
    )


def _worker_grid(worker_count: int) -> tuple[int, int]:
    # most-square factorisation, fewer rows than columns
    pr = int(math.isqrt(worker_count))
    while worker_count % pr:
        pr -= 1
    return pr, worker_count // pr


@dataclass(frozen=True)
class LayoutSpec:
    grid: BlockGrid
    assignment: tuple[tuple[WorkerId, ...], ...]
    kind: LayoutKind
    worker_count: int
    clamped: bool = False

    def __post_init__(self):
        if len(self.assignment) != self.grid.n_block_rows or any(
            len(row) != self.grid.n_block_cols for row in self.assignment
        ):
            raise LayoutError("assignment does not cover the block grid")

    def owner(self, coord: Coord) -> WorkerId:
        if not self.grid.contains(coord):
            raise LayoutError(f"block {coord} outside layout grid")
        return self.assignment[coord[0]][coord[1]]

    @property
    def workers(self) -> frozenset[WorkerId]:
        return frozenset(w for row in self.assignment for w in row)

    def blocks_of(self, worker: WorkerId) -> list[Coord]:
        return [c for c in self.grid.coords() if self.owner(c) == worker]

    def remap_workers(self, mapping: Mapping[WorkerId, WorkerId]) -> "LayoutSpec":
        table = tuple(tuple(mapping[w] for w in row) for row in self.assignment)
        kind = self.kind if all(mapping.get(w, w) == w for w in self.workers) else LayoutKind.CUSTOM
        return replace(self, assignment=table, kind=kind,
                       worker_count=max(self.worker_count, max(mapping.values()) + 1))

    def to_text(self) -> str:
        g = self.grid
        head = (f"{self.kind.value}:{g.global_rows}x{g.global_cols}:"
                f"{g.block_rows}x{g.block_cols}:{self.worker_count}")
        if self.kind is LayoutKind.CUSTOM:
            table = ";".join(",".join(str(w) for w in row) for row in self.assignment)
            return f"{head}:{table}"
        return head

    @classmethod
    def from_text(cls, text: str) -> "LayoutSpec":
        parts = text.strip().split(":")
        if len(parts) not in (4, 5):
            raise LayoutError(f"bad layout string {text!r}")
        try:
            kind = LayoutKind.parse(parts[0])
            gr, gc = (int(x) for x in parts[1].split("x"))
            br, bc = (int(x) for x in parts[2].split("x"))
            workers = int(parts[3])
        except ValueError as exc:
            raise LayoutError(f"bad layout string {text!r}: {exc}") from None
        if kind is LayoutKind.CUSTOM:
            if len(parts) != 5:
                raise LayoutError("custom layout needs an assignment table")
            table = tuple(tuple(int(w) for w in row.split(",")) for row in parts[4].split(";"))
            return cls(BlockGrid(gr, gc, br, bc), table, kind, workers)
        return make_layout(kind, gr, gc, br, bc, workers)


def make_layout(kind: LayoutKind | str, global_rows: int, global_cols: int,
                block_rows: int, block_cols: int, worker_count: int,
                table: Mapping[Coord, WorkerId] | None = None) -> LayoutSpec:
    """Build a layout of ``kind``. Oversized blocks are clamped, not rejected."""
    if isinstance(kind, str):
        kind = LayoutKind.parse(kind)
    if worker_count < 1:
        raise LayoutError("worker_count must be >= 1")
    if min(global_rows, global_cols, block_rows, block_cols) < 1:
        raise LayoutError("dimensions must be positive")
    clamped = block_rows > global_rows or block_cols > global_cols
    grid = BlockGrid(global_rows, global_cols, min(block_rows, global_rows), min(block_cols, global_cols))
    nbr, nbc = grid.n_block_rows, grid.n_block_cols

    if kind is LayoutKind.ROW_BLOCKS_1D:
        rule = lambda i, j: i * worker_count // nbr  # noqa: E731
    elif kind is LayoutKind.COL_BLOCKS_1D:
        rule = lambda i, j: j * worker_count // nbc  # noqa: E731
    elif kind is LayoutKind.ROW_CYCLIC_1D:
        rule = lambda i, j: i % worker_count  # noqa: E731
    elif kind is LayoutKind.CHECKERBOARD_2D:
        pr, pc = _worker_grid(worker_count)
        rule = lambda i, j: (i % pr) * pc + (j % pc)  # noqa: E731
    else:
        if table is None:
            raise LayoutError("custom layout needs an assignment table")
        missing = [c for c in grid.coords() if c not in table]
        if missing:
            raise LayoutError(f"custom assignment missing blocks {missing[:4]}")
        rule = lambda i, j: table[(i, j)]  # noqa: E731

    assignment = tuple(tuple(rule(i, j) for j in range(nbc)) for i in range(nbr))
    if any(not 0 <= w < worker_count for row in assignment for w in row):
        raise LayoutError("assignment references a worker outside the worker count")
    return LayoutSpec(grid, assignment, kind, worker_count, clamped)


def owner_of(layout: LayoutSpec, coord: Coord) -> WorkerId:
    return layout.owner(coord)


@dataclass(frozen=True)
class MatrixDescriptor:
    matrix_id: int
    layout: LayoutSpec
    precision: Precision
    replicated: bool = False
    version: int = 0
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.layout.grid.shape

    def bumped(self) -> "MatrixDescriptor":
        return replace(self, version=self.version + 1)

    def to_record(self) -> dict:
        return {
            "id": self.matrix_id,
            "layout": self.layout.to_text(),
            "precision": self.precision.label,
            "replicated": self.replicated,
            "version": self.version,
            "seed": self.seed,
        }


def descriptor_table_digest(table: Mapping[int, MatrixDescriptor]) -> str:
    """Stable digest of a descriptor table, used to check agreement across workers."""
    blob = json.dumps([table[k].to_record() for k in sorted(table)], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class BlockBuffer:
    """One block (or, for remaps, a rectangular piece of one) of a matrix.

    ``region`` is ``None`` for whole blocks; pieces carry
    ``(row0, col0, rows, cols)`` in global coordinates.
    """

    coord: Coord
    data: np.ndarray
    precision: Precision
    provenance: Provenance
    matrix_id: int
    version_seen: int = 0
    region: tuple[int, int, int, int] | None = None
    pool_buffer: object | None = field(default=None, repr=False, compare=False)

    @property
    def nbytes(self) -> int:
        return self.data.size * self.precision.byte_width

    def is_stale(self, descriptor: MatrixDescriptor) -> bool:
        return self.version_seen < descriptor.version

    def check_extent(self, grid: BlockGrid) -> None:
        if self.region is None and self.data.shape != block_extent(grid, self.coord):
            raise LayoutError(
                f"block {self.coord} holds {self.data.shape}, grid says {block_extent(grid, self.coord)}"
            )

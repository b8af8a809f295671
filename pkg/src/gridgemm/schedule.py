"""Cyclic ring plans and a list-scheduling makespan model.

Nothing here touches data. Schedules are built from layouts and the
transport cost model, then replayed over three kinds of resource:
``compute:w``, ``out:w`` and ``in:w``. Each resource runs one event at a
time. Modeled makespan is the finish time of the last event.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import Coord, LayoutError, LayoutKind, LayoutSpec, MatrixDescriptor, Precision, make_layout
from .transport import HEADER_BYTES, CostModel, Topology, TransferRecord

DEFAULT_FLOPS_RATE = 2.0e7  # flops per microsecond, i.e. 20 TFLOP/s per worker


@dataclass(frozen=True)
class CyclicPlan:
    """Ring schedule for row-blocked A over ``worker_count`` workers.

    At outer stage ``o`` worker ``w`` holds the blocks that started on
    worker ``(w - o) mod P``; inner stage ``i`` walks that worker's
    block-rows in order.
    """

    worker_count: int
    a_blocks: tuple[tuple[Coord, ...], ...]

    @classmethod
    def from_layout(cls, a_layout: LayoutSpec, worker_count: int) -> "CyclicPlan":
        if a_layout.grid.n_block_cols != 1:
            raise LayoutError("cyclic plan needs A split into full-width block-rows")
        per = tuple(tuple(a_layout.blocks_of(w)) for w in range(worker_count))
        return cls(worker_count, per)

    @property
    def blocks_per_worker(self) -> int:
        return max((len(b) for b in self.a_blocks), default=0)

    @property
    def outer_stages(self) -> int:
        return self.worker_count

    def origin(self, worker: int, outer: int) -> int:
        return (worker - outer) % self.worker_count

    def held(self, worker: int, outer: int, inner: int) -> Coord | None:
        blocks = self.a_blocks[self.origin(worker, outer)]
        return blocks[inner] if inner < len(blocks) else None

    def successor(self, worker: int) -> int:
        return (worker + 1) % self.worker_count

    def predecessor(self, worker: int) -> int:
        return (worker - 1) % self.worker_count

    def stages(self) -> Iterable[tuple[int, int]]:
        for o in range(self.outer_stages):
            for i in range(self.blocks_per_worker):
                yield o, i

    def transfer_count(self) -> int:
        n_blocks = sum(len(b) for b in self.a_blocks)
        return n_blocks * (self.worker_count - 1)


def stage_tag(op: str, outer: int, inner: int) -> str:
    return f"{op}:{outer}.{inner}"


def parse_stage(tag: str) -> tuple[int, ...]:
    return tuple(int(x) for x in tag.rsplit(":", 1)[1].split("."))


# --- events and simulation ------------------------------------------------


@dataclass
class Event:
    name: str
    kind: str  # "compute" or "transfer"
    duration: float
    resources: tuple[str, ...]
    deps: tuple[str, ...] = ()
    reads: tuple = ()
    writes: tuple = ()
    flops: float = 0.0
    start: float = 0.0
    end: float = 0.0


@dataclass
class Schedule:
    events: list[Event] = field(default_factory=list)
    _by_name: dict = field(default_factory=dict, repr=False)

    def add(self, ev: Event) -> Event:
        if ev.name in self._by_name:
            raise ValueError(f"duplicate event {ev.name}")
        self.events.append(ev)
        self._by_name[ev.name] = ev
        return ev

    def has(self, name: str) -> bool:
        return name in self._by_name

    def simulate(self) -> float:
        """List scheduling in insertion order; events must be added after their deps."""
        free: dict[str, float] = defaultdict(float)
        for ev in self.events:
            ready = max((self._by_name[d].end for d in ev.deps), default=0.0)
            ev.start = max([ready] + [free[r] for r in ev.resources])
            ev.end = ev.start + ev.duration
            for r in ev.resources:
                free[r] = ev.end
        return self.makespan

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    @property
    def transfer_count(self) -> int:
        return sum(e.kind == "transfer" for e in self.events)

    @property
    def compute_time(self) -> float:
        """Per-worker compute summed, maximum over workers."""
        per = defaultdict(float)
        for e in self.events:
            if e.kind == "compute":
                per[e.resources[0]] += e.duration
        return max(per.values(), default=0.0)


def buffer_violations(schedule: Schedule) -> list[tuple]:
    """Pairs of events whose intervals overlap while one writes a buffer the other uses."""
    uses = defaultdict(list)
    for ev in schedule.events:
        for b in ev.reads:
            uses[b].append(("r", ev))
        for b in ev.writes:
            uses[b].append(("w", ev))
    bad = []
    for buf, items in uses.items():
        for x in range(len(items)):
            for y in range(x + 1, len(items)):
                (ka, a), (kb, b) = items[x], items[y]
                if "w" not in (ka, kb) or a is b:
                    continue
                if a.start < b.end and b.start < a.end:
                    bad.append((buf, a.name, b.name))
    return bad


# --- schedule builders ----------------------------------------------------


@dataclass(frozen=True)
class GemmGeometry:
    """What the models need to know about a GEMM: A block sizes and C columns per worker."""

    plan: CyclicPlan
    a_elems: dict
    c_cols: tuple[int, ...]
    precision: Precision

    @classmethod
    def from_descriptors(cls, a: MatrixDescriptor, c: MatrixDescriptor, worker_count: int) -> "GemmGeometry":
        plan = CyclicPlan.from_layout(a.layout, worker_count)
        grid = a.layout.grid
        elems = {}
        for coord in grid.coords():
            lo, hi = grid.row_range(coord[0])
            elems[coord] = (hi - lo) * grid.global_cols
        cols = [0] * worker_count
        for coord in c.layout.grid.coords():
            lo, hi = c.layout.grid.col_range(coord[1])
            cols[c.layout.owner(coord)] += hi - lo
        return cls(plan, elems, tuple(cols), a.precision)

    @classmethod
    def square(cls, n: int, worker_count: int, inner: int = 1,
               precision: Precision = Precision.SINGLE32) -> "GemmGeometry":
        rows = -(-n // (worker_count * inner))
        a = make_layout(LayoutKind.ROW_BLOCKS_1D, n, n, rows, n, worker_count)
        c = make_layout(LayoutKind.COL_BLOCKS_1D, n, n, n, -(-n // worker_count), worker_count)
        return cls.from_descriptors(MatrixDescriptor(0, a, precision), MatrixDescriptor(1, c, precision),
                                    worker_count)

    def flops(self, worker: int, coord: Coord) -> float:
        return 2.0 * self.a_elems[coord] * self.c_cols[worker]

    def wire_bytes(self, coord: Coord) -> int:
        return self.a_elems[coord] * self.precision.byte_width + HEADER_BYTES


def cyclic_schedule(geo: GemmGeometry, topology: Topology, cost: CostModel,
                    flops_rate: float = DEFAULT_FLOPS_RATE, double_buffer: bool = True,
                    op: str = "cyclic_gemm") -> Schedule:
    plan, P = geo.plan, geo.plan.worker_count
    sched = Schedule()

    def buf(w, i, o):
        if o == 0:
            return ("own", w, i)
        return ("slot", w, i, o % 2 if double_buffer else 0)

    for o, i in plan.stages():
        for w in range(P):
            coord = plan.held(w, o, i)
            if coord is None:
                continue
            prev = plan.predecessor(w)
            arrival = (f"x:{prev}:{o - 1}.{i}",) if o > 0 else ()
            sched.add(Event(f"c:{w}:{o}.{i}", "compute", geo.flops(w, coord) / flops_rate,
                            (f"compute:{w}",), arrival, reads=(buf(w, i, o),),
                            flops=geo.flops(w, coord)))
            if o == P - 1:
                continue
            dst = plan.successor(w)
            deps = list(arrival)
            if double_buffer and o >= 1:
                # dst's back buffer for stage o+1 was last used at stage o-1
                for name in (f"c:{dst}:{o - 1}.{i}", f"x:{dst}:{o - 1}.{i}"):
                    if sched.has(name):
                        deps.append(name)
            nbytes = geo.wire_bytes(coord)
            sched.add(Event(f"x:{w}:{o}.{i}", "transfer",
                            cost.time_us(topology.medium(w, dst), nbytes),
                            (f"out:{w}", f"in:{dst}"), tuple(deps),
                            reads=(buf(w, i, o),), writes=(buf(dst, i, o + 1),)))
    sched.simulate()
    return sched


def broadcast_schedule(geo: GemmGeometry, topology: Topology, cost: CostModel,
                       flops_rate: float = DEFAULT_FLOPS_RATE) -> Schedule:
    """Stage-synchronous baseline: each A block goes from its owner to every other worker."""
    P = geo.plan.worker_count
    order = sorted((c, w) for w, blocks in enumerate(geo.plan.a_blocks) for c in blocks)
    sched = Schedule()
    prev_stage: list[str] = []
    for s, (coord, owner) in enumerate(order):
        names = []
        for d in range(P):
            if d == owner:
                continue
            name = f"x:{owner}>{d}:{s}"
            sched.add(Event(name, "transfer",
                            cost.time_us(topology.medium(owner, d), geo.wire_bytes(coord)),
                            (f"out:{owner}", f"in:{d}"), tuple(prev_stage)))
            names.append(name)
        for d in range(P):
            deps = () if d == owner else (f"x:{owner}>{d}:{s}",)
            sched.add(Event(f"c:{d}:{s}", "compute", geo.flops(d, coord) / flops_rate,
                            (f"compute:{d}",), deps, flops=geo.flops(d, coord)))
        prev_stage = names
    sched.simulate()
    return sched


def trace_schedule(records: Sequence[TransferRecord], computes: Sequence[tuple[int, float, str]],
                   flops_rate: float = DEFAULT_FLOPS_RATE) -> Schedule:
    """Generic model for ops without a closed-form plan: transfers in trace order,
    then each worker's computes after everything it received."""
    sched = Schedule()
    inbound = defaultdict(list)
    for r in records:
        name = f"x:{r.sequence}"
        sched.add(Event(name, "transfer", r.modeled_time, (f"out:{r.src}", f"in:{r.dst}")))
        inbound[r.dst].append(name)
    for n, (w, flops, tag) in enumerate(computes):
        sched.add(Event(f"c:{w}:{n}", "compute", flops / flops_rate, (f"compute:{w}",),
                        tuple(inbound[w]), flops=flops))
    sched.simulate()
    return sched


def max_port_concurrency(records: Iterable[TransferRecord]) -> int:
    """Largest number of transfers one sender starts within a single stage tag."""
    counts = defaultdict(int)
    for r in records:
        counts[(r.op_tag, r.src)] += 1
    return max(counts.values(), default=0)


# --- scaling sweep ----------------------------------------------------------


@dataclass(frozen=True)
class ScalingEntry:
    size: int
    workers: int
    makespan_us: float
    compute_us: float
    transfer_count: int


def scaling_table(sizes: Sequence[int], worker_counts: Sequence[int], cost: CostModel,
                  flops_rate: float = DEFAULT_FLOPS_RATE,
                  precision: Precision = Precision.SINGLE32,
                  topology_for=Topology.default) -> list[ScalingEntry]:
    out = []
    for n in sizes:
        for p in worker_counts:
            sched = cyclic_schedule(GemmGeometry.square(n, p, 1, precision), topology_for(p), cost,
                                    flops_rate)
            out.append(ScalingEntry(n, p, sched.makespan, sched.compute_time, sched.transfer_count))
    return out


def best_workers(table: Sequence[ScalingEntry]) -> dict[int, int]:
    best: dict[int, ScalingEntry] = {}
    for e in table:
        if e.size not in best or e.makespan_us < best[e.size].makespan_us:
            best[e.size] = e
    return {n: e.workers for n, e in best.items()}


def has_crossover(table: Sequence[ScalingEntry], size_lo: int, size_hi: int, p_lo: int, p_hi: int) -> bool:
    """True when ``p_lo`` beats ``p_hi`` at ``size_lo`` and loses at ``size_hi``."""
    t = {(e.size, e.workers): e.makespan_us for e in table}
    return t[(size_lo, p_lo)] < t[(size_lo, p_hi)] and t[(size_hi, p_hi)] < t[(size_hi, p_lo)]

"""Master/worker runtime.

The master is a synchronous facade: each library call becomes one or more
``Command`` values that every worker executes in the same global order.
Worker handlers are plain functions or generators; a generator yields the
transfer handles it needs to wait on, which lets one handler body run
under two drivers:

* the deterministic scheduler, which steps workers round-robin in id
  order inside the calling thread (one yield per worker per pass), and
* threaded mode, where each worker owns a thread and blocks on its
  handles.

``GRIDGEMM_DETERMINISTIC=1`` forces the first.
"""
from __future__ import annotations

import enum
import hashlib
import inspect
import itertools
import logging
import os
import queue
import struct
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .core import (MASTER, BlockBuffer, Coord, LayoutError, LayoutKind, LayoutSpec,
                   MatrixDescriptor, Precision, Provenance, block_extent,
                   descriptor_table_digest, make_layout)
from .kernels import ShapeError, convert_precision
from .pool import Pool
from .transport import (AbortedError, CostModel, DeadlockError, Topology, TransferHandle,
                        Transport)

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


class RuntimeStateError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass


class EndOfData(Exception):
    pass


class OpCode(enum.Enum):
    CREATE_MATRIX = "create_matrix"
    DESTROY_MATRIX = "destroy_matrix"
    SCATTER = "scatter"
    GATHER = "gather"
    WRITE_BLOCK = "write_block"
    SEED = "seed"
    CHECKPOINT = "checkpoint"
    RESTORE = "restore"
    SHUTDOWN = "shutdown"
    SYNC_DESCRIPTORS = "sync_descriptors"
    REGISTER_DATASET = "register_dataset"
    PREFETCH = "prefetch"
    CYCLIC_GEMM = "cyclic_gemm"
    BROADCAST_GEMM = "broadcast_gemm_reference"
    GENERAL_GEMM = "general_gemm"
    CACHE_PROBE = "cache_probe"
    CACHED_BACKWARD_GEMM = "cached_backward_gemm"
    SET_CACHING = "set_caching"
    REPLICATE = "replicate"
    REPLICA_PROBE = "replica_probe"
    REPLICA_REFRESH = "replica_refresh"
    READ_REPLICA = "read_replica"
    RESHAPE = "reshape"
    ADD_ROW_COL_SUM = "add_row_col_sum"


@dataclass(frozen=True)
class Command:
    op_code: OpCode
    args: dict
    ticket: int
    # descriptor-table effects, applied identically by master and workers:
    # ("put", record) | ("bump", matrix_id) | ("drop", matrix_id)
    effects: tuple = ()


@dataclass
class Ack:
    ticket: int
    worker: int
    result: Any = None
    error: BaseException | None = None


@dataclass(frozen=True)
class AnyOf:
    """Wait until the first of several receive handles completes."""
    handles: tuple


HANDLERS: dict[OpCode, Callable] = {}


def handles(op: OpCode):
    def register(fn):
        HANDLERS[op] = fn
        return fn
    return register


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def split_seed(root: int, key: int) -> int:
    return splitmix64((root & MASK64) ^ splitmix64(key & MASK64))


def descriptor_from_record(rec: dict) -> MatrixDescriptor:
    return MatrixDescriptor(rec["id"], LayoutSpec.from_text(rec["layout"]),
                            Precision.parse(rec["precision"]), rec["replicated"],
                            rec["version"], rec["seed"])


def apply_effects(table: dict[int, MatrixDescriptor], effects: Iterable) -> None:
    for kind, value in effects:
        if kind == "put":
            desc = descriptor_from_record(value)
            table[desc.matrix_id] = desc
        elif kind == "bump":
            table[value] = table[value].bumped()
        elif kind == "drop":
            table.pop(value, None)
        elif kind == "replicated":
            mid, flag = value
            table[mid] = replace(table[mid], replicated=flag)
        elif kind == "table":
            table.clear()
            for rec in value:
                apply_effects(table, [("put", rec)])
        else:
            raise ValueError(f"unknown effect {kind!r}")


# --- synthetic datasets ---------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    element_count: int
    batch_size: int
    feature_dim: int
    seed: int = 0
    sampling: str = "sequential"  # or "random"

    def __post_init__(self):
        if min(self.element_count, self.batch_size, self.feature_dim) < 1:
            raise ValueError("dataset sizes must be positive")
        if self.batch_size > self.element_count:
            raise ValueError("batch larger than dataset")
        if self.sampling not in ("sequential", "random"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")

    @property
    def n_batches(self) -> int:
        return self.element_count // self.batch_size

    def batch_indices(self, batch: int) -> np.ndarray:
        if self.sampling == "sequential":
            return np.arange(batch * self.batch_size, (batch + 1) * self.batch_size)
        rng = np.random.default_rng([self.seed, 0x5A3, batch])
        return np.sort(rng.choice(self.element_count, self.batch_size, replace=False))

    def rows(self, indices: Sequence[int]) -> np.ndarray:
        out = np.empty((len(indices), self.feature_dim), dtype=np.float64)
        for r, e in enumerate(indices):
            out[r] = np.random.default_rng([self.seed, int(e)]).standard_normal(self.feature_dim)
        return out


def dataset_batch(config: DatasetConfig, batch: int) -> np.ndarray:
    """Host-side copy of one batch; the oracle for prefetch."""
    return config.rows(config.batch_indices(batch))


# --- workers --------------------------------------------------------------


class Worker:
    def __init__(self, wid: int, transport: Transport, threaded: bool = False):
        self.id = wid
        self.transport = transport
        self.pool = Pool(wid)
        self.seed = 0
        self.descriptors: dict[int, MatrixDescriptor] = {}
        self.owned: dict[tuple[int, Coord], BlockBuffer] = {}
        self.cache: dict[tuple[int, Coord], BlockBuffer] = {}
        self.replicas: dict[tuple[int, Coord], BlockBuffer] = {}
        self.caching: set[int] = set()
        self.datasets: dict[int, DatasetConfig] = {}
        self.loads: dict[int, Future] = {}
        self.compute_log: list[tuple[float, str]] = []
        self.host_window: dict | None = None
        self._loader = ThreadPoolExecutor(1, f"loader-{wid}") if threaded else None

    # -- block bookkeeping
    def desc(self, mid: int) -> MatrixDescriptor:
        try:
            return self.descriptors[mid]
        except KeyError:
            raise RuntimeStateError(f"worker {self.id}: unknown matrix {mid}") from None

    def alloc_block(self, mid: int, coord: Coord, shape, precision: Precision,
                    provenance: Provenance, version: int = 0) -> BlockBuffer:
        arr, pbuf = self.pool.array(tuple(shape), precision.dtype)
        return BlockBuffer(coord, arr, precision, provenance, mid, version, pool_buffer=pbuf)

    def free_block(self, block: BlockBuffer) -> None:
        if block.pool_buffer is not None and block.pool_buffer.live:
            self.pool.release(block.pool_buffer)
        block.pool_buffer = None

    def ensure_loaded(self, mid: int) -> None:
        fut = self.loads.pop(mid, None)
        if fut is not None:
            fut.result()

    def block(self, mid: int, coord: Coord) -> BlockBuffer:
        self.ensure_loaded(mid)
        try:
            return self.owned[(mid, coord)]
        except KeyError:
            raise RuntimeStateError(f"worker {self.id} does not own {coord} of matrix {mid}") from None

    def my_blocks(self, mid: int) -> list[Coord]:
        return self.desc(mid).layout.blocks_of(self.id)

    def drop_matrix(self, mid: int) -> None:
        self.ensure_loaded(mid)
        for store in (self.owned, self.cache, self.replicas):
            for key in [k for k in store if k[0] == mid]:
                self.free_block(store.pop(key))
        self.caching.discard(mid)

    def drop_cache(self, mid: int) -> None:
        for key in [k for k in self.cache if k[0] == mid]:
            self.free_block(self.cache.pop(key))

    def log_compute(self, flops: float, tag: str) -> None:
        self.compute_log.append((flops, tag))

    def start(self, cmd: Command):
        snapshot = dict(self.descriptors)
        try:
            apply_effects(self.descriptors, cmd.effects)
            return HANDLERS[cmd.op_code](self, cmd.args)
        except BaseException:
            self.descriptors = snapshot
            raise

    def close(self) -> None:
        if self._loader is not None:
            self._loader.shutdown(wait=True)


class Session:
    """Master-side facade over a set of workers."""

    def __init__(self, worker_count: int, topology: Topology | None = None,
                 cost_model: CostModel | None = None, root_seed: int = 0,
                 deterministic: bool | None = None, timeout: float = 30.0,
                 master_adjacent_worker: int | None = None):
        if worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if os.environ.get("GRIDGEMM_DETERMINISTIC") == "1":
            deterministic = True
        self.deterministic = True if deterministic is None else deterministic
        self.worker_count = worker_count
        self.timeout = timeout
        self.transport = Transport(worker_count, topology, cost_model)
        self.topology = self.transport.topology
        self.cost_model = self.transport.cost_model
        self.root_seed = root_seed & MASK64
        self.master_adjacent_worker = master_adjacent_worker
        self.descriptors: dict[int, MatrixDescriptor] = {}
        self.worker_seeds: list[int] = []
        self.workers = [Worker(w, self.transport, threaded=not self.deterministic)
                        for w in range(worker_count)]
        self.host_window: dict = {}
        for w in self.workers:
            w.host_window = self.host_window
        self._tickets = itertools.count()
        self._next_id = 0
        self._dataset_ids = itertools.count()
        self._cursors: dict[int, int] = {}
        self._dataset_cfgs: dict[int, DatasetConfig] = {}
        self.alive = True
        self._threads: list[threading.Thread] = []
        self._inboxes: list[queue.Queue] = []
        self._replies: queue.Queue = queue.Queue()
        if not self.deterministic:
            self._start_threads()
        seed_workers(self, self.root_seed)

    # -- driving commands
    def _start_threads(self) -> None:
        for w in self.workers:
            q: queue.Queue = queue.Queue()
            t = threading.Thread(target=self._run_loop, args=(w, q), name=f"worker-{w.id}",
                                 daemon=True)
            self._inboxes.append(q)
            self._threads.append(t)
            t.start()

    def _run_loop(self, worker: Worker, inbox: queue.Queue) -> None:
        while True:
            cmd = inbox.get()
            if cmd is None:
                return
            try:
                out = worker.start(cmd)
                if inspect.isgenerator(out):
                    out = self._drive_blocking(out)
                self._replies.put(Ack(cmd.ticket, worker.id, out))
            except BaseException as exc:  # noqa: BLE001 - forwarded to the master
                if not isinstance(exc, AbortedError):
                    self.transport.abort(exc)
                self._replies.put(Ack(cmd.ticket, worker.id, error=exc))

    def _drive_blocking(self, gen):
        value = None
        while True:
            try:
                spec = gen.send(value)
            except StopIteration as stop:
                return stop.value
            value = self._wait_spec(spec, self.timeout)

    def _wait_spec(self, spec, timeout):
        t = self.transport
        if spec is None:
            return None
        if isinstance(spec, TransferHandle):
            return t.wait(spec, timeout)
        if isinstance(spec, AnyOf):
            return t.wait_any(spec.handles, timeout)
        return [t.wait(h, timeout) for h in spec]

    def _spec_ready(self, spec) -> bool:
        t = self.transport
        if spec is None:
            return True
        if isinstance(spec, TransferHandle):
            return t.ready(spec)
        if isinstance(spec, AnyOf):
            return any(t.ready(h) for h in spec.handles if not h.consumed)
        return all(t.ready(h) for h in spec)

    def _run_deterministic(self, cmd: Command) -> list[Ack]:
        acks: dict[int, Ack] = {}
        gens: dict[int, Any] = {}
        waiting: dict[int, Any] = {}
        for w in self.workers:
            try:
                out = w.start(cmd)
            except Exception as exc:  # noqa: BLE001
                acks[w.id] = Ack(cmd.ticket, w.id, error=exc)
                continue
            if inspect.isgenerator(out):
                gens[w.id] = out
                waiting[w.id] = ("start",)
            else:
                acks[w.id] = Ack(cmd.ticket, w.id, out)
        while gens:
            progressed = False
            for wid in sorted(gens):
                spec = waiting[wid]
                gen = gens[wid]
                try:
                    if spec == ("start",):
                        waiting[wid] = next(gen)
                    elif self._spec_ready(spec):
                        waiting[wid] = gen.send(self._wait_spec(spec, 0))
                    else:
                        continue
                    progressed = True
                except StopIteration as stop:
                    acks[wid] = Ack(cmd.ticket, wid, stop.value)
                    del gens[wid]
                    progressed = True
                except Exception as exc:  # noqa: BLE001
                    acks[wid] = Ack(cmd.ticket, wid, error=exc)
                    del gens[wid]
                    progressed = True
            if not progressed:
                failed = [a for a in acks.values() if a.error is not None]
                err: BaseException = (AbortedError("peer failed") if failed else
                                      DeadlockError(f"{cmd.op_code.value}: workers "
                                                    f"{sorted(gens)} blocked with no progress"))
                for wid, gen in list(gens.items()):
                    gen.close()
                    acks[wid] = Ack(cmd.ticket, wid, error=err)
                gens.clear()
        return [acks[w] for w in range(self.worker_count)]

    def execute(self, op: OpCode, args: dict | None = None, effects: Sequence = ()) -> list:
        """Issue one command to every worker and return their results in id order."""
        if not self.alive:
            raise RuntimeStateError("session is shut down")
        cmd = Command(op, dict(args or {}), next(self._tickets), tuple(effects))
        if self.deterministic:
            acks = self._run_deterministic(cmd)
        else:
            for q in self._inboxes:
                q.put(cmd)
            got: dict[int, Ack] = {}
            while len(got) < self.worker_count:
                ack = self._replies.get()
                if ack.ticket == cmd.ticket:
                    got[ack.worker] = ack
            acks = [got[w] for w in range(self.worker_count)]
        errors = [a.error for a in acks if a.error is not None]
        if errors:
            self.transport.reset_channels()
            self._resync()
            primary = [e for e in errors if not isinstance(e, (AbortedError, DeadlockError))]
            raise (primary or errors)[0]
        apply_effects(self.descriptors, cmd.effects)
        return [a.result for a in acks]

    def _resync(self) -> None:
        table = [self.descriptors[k].to_record() for k in sorted(self.descriptors)]
        cmd = Command(OpCode.SYNC_DESCRIPTORS, {}, next(self._tickets), (("table", table),))
        for w in self.workers:
            w.start(cmd)

    # -- bookkeeping helpers used by the op facades
    def desc(self, mid: int) -> MatrixDescriptor:
        try:
            return self.descriptors[mid]
        except KeyError:
            raise RuntimeStateError(f"unknown or destroyed matrix {mid}") from None

    def new_matrix_id(self) -> int:
        mid = self._next_id
        self._next_id += 1
        return mid

    def descriptor_digests(self) -> dict[int, str]:
        out = {MASTER: descriptor_table_digest(self.descriptors)}
        for w in self.workers:
            out[w.id] = descriptor_table_digest(w.descriptors)
        return out

    def trace(self):
        return self.transport.trace_dump()

    def pool_stats(self) -> dict[int, dict]:
        return {w.id: w.pool.snapshot() for w in self.workers}

    def compute_marks(self) -> list[int]:
        return [len(w.compute_log) for w in self.workers]

    def computes_since(self, marks: Sequence[int]) -> list[tuple[int, float, str]]:
        return [(w.id, f, tag) for w, m in zip(self.workers, marks) for f, tag in w.compute_log[m:]]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        shutdown(self)


# --- master-side operations ---------------------------------------------------


def init(worker_count: int, topology: Topology | None = None, cost_model: CostModel | None = None,
         root_seed: int = 0, **kwargs) -> Session:
    return Session(worker_count, topology, cost_model, root_seed, **kwargs)


def seed_workers(session: Session, root_seed: int) -> list[int]:
    session.root_seed = root_seed & MASK64
    seeds = session.execute(OpCode.SEED, {"root": session.root_seed})
    session.worker_seeds = list(seeds)
    return session.worker_seeds


@handles(OpCode.SEED)
def _seed(worker: Worker, args):
    worker.seed = split_seed(args["root"], worker.id)
    return worker.seed


@handles(OpCode.SYNC_DESCRIPTORS)
def _sync(worker: Worker, args):
    return None


FILL_ZEROS = "zeros"
FILL_RANDOM = "random"
FILL_HOST = "host"


def _block_random(seed: int, coord: Coord, shape, precision: Precision) -> np.ndarray:
    rng = np.random.default_rng([seed, coord[0], coord[1]])
    return convert_precision(rng.standard_normal(shape), precision)


def _host_blocks(desc: MatrixDescriptor, host: np.ndarray):
    grid = desc.layout.grid
    conv = convert_precision(host, desc.precision)
    for coord in grid.coords():
        yield coord, desc.layout.owner(coord), np.ascontiguousarray(conv[grid.slices(coord)])


def _send_from_master(session: Session, desc: MatrixDescriptor, host: np.ndarray, tag: str) -> None:
    host = np.asarray(host)
    if host.shape != desc.shape:
        raise ShapeError(f"host data {host.shape} does not match matrix {desc.shape}")
    adj = session.master_adjacent_worker
    for coord, owner, data in _host_blocks(desc, host):
        blk = BlockBuffer(coord, data, desc.precision, Provenance.TRANSIT, desc.matrix_id,
                          desc.version)
        if owner == adj:
            session.host_window[(desc.matrix_id, coord)] = blk
        else:
            session.transport.send_block_async(MASTER, owner, blk, tag)


def _receive_owned(worker: Worker, mid: int, version: int):
    """Generator: fill this worker's owned blocks from master messages."""
    desc = worker.desc(mid)
    mine = worker.my_blocks(mid)
    remote = [c for c in mine if worker.id != _adjacent(worker)]
    handles_ = [worker.transport.recv_async(worker.id, MASTER) for _ in remote]
    got = (yield handles_) if handles_ else []
    incoming = {b.coord: b for b in got}
    if worker.id == _adjacent(worker):
        incoming = {c: worker.host_window.pop((mid, c)) for c in mine}
    for coord in mine:
        shape = block_extent(desc.layout.grid, coord)
        blk = worker.owned.get((mid, coord))
        if blk is None:
            blk = worker.alloc_block(mid, coord, shape, desc.precision, Provenance.OWNED)
            worker.owned[(mid, coord)] = blk
        blk.data[...] = incoming[coord].data
        blk.version_seen = version


def _adjacent(worker: Worker):
    return worker.host_window.get("__adjacent__")


def create_matrix(session: Session, layout: LayoutSpec, precision: Precision = Precision.DOUBLE64,
                  fill: str = FILL_ZEROS, data: np.ndarray | None = None,
                  seed: int | None = None, version: int = 0, replicated: bool = False,
                  matrix_id: int | None = None) -> int:
    if not layout.workers <= set(range(session.worker_count)):
        raise LayoutError(f"layout uses workers {sorted(layout.workers)} outside the session")
    if fill == FILL_HOST and data is None:
        raise ValueError("host fill needs data")
    mid = session.new_matrix_id() if matrix_id is None else matrix_id
    if seed is None:
        seed = split_seed(session.root_seed, 0x4D00000000 + mid)
    desc = MatrixDescriptor(mid, layout, precision, replicated, version, seed)
    if fill == FILL_HOST:
        session.host_window["__adjacent__"] = session.master_adjacent_worker
        _send_from_master(session, desc, data, "create_matrix")
    session.execute(OpCode.CREATE_MATRIX, {"id": mid, "fill": fill},
                    effects=[("put", desc.to_record())])
    return mid


@handles(OpCode.CREATE_MATRIX)
def _create(worker: Worker, args):
    mid, fill = args["id"], args["fill"]
    desc = worker.desc(mid)
    if fill == FILL_HOST:
        return _receive_owned(worker, mid, desc.version)
    for coord in worker.my_blocks(mid):
        shape = block_extent(desc.layout.grid, coord)
        blk = worker.alloc_block(mid, coord, shape, desc.precision, Provenance.OWNED, desc.version)
        if fill == FILL_ZEROS:
            blk.data[...] = 0
        elif fill == FILL_RANDOM:
            blk.data[...] = _block_random(desc.seed, coord, shape, desc.precision)
        else:
            raise ValueError(f"unknown fill {fill!r}")
        worker.owned[(mid, coord)] = blk
    return None


def destroy_matrix(session: Session, mid: int) -> None:
    session.desc(mid)
    session.execute(OpCode.DESTROY_MATRIX, {"id": mid}, effects=[("drop", mid)])


@handles(OpCode.DESTROY_MATRIX)
def _destroy(worker: Worker, args):
    worker.drop_matrix(args["id"])


def scatter(session: Session, mid: int, host_data: np.ndarray) -> None:
    desc = session.desc(mid)
    session.host_window["__adjacent__"] = session.master_adjacent_worker
    _send_from_master(session, desc.bumped(), host_data, "scatter")
    session.execute(OpCode.SCATTER, {"id": mid}, effects=[("bump", mid)])


@handles(OpCode.SCATTER)
def _scatter(worker: Worker, args):
    mid = args["id"]
    return _receive_owned(worker, mid, worker.desc(mid).version)


def write_block(session: Session, mid: int, coord: Coord, data: np.ndarray) -> None:
    """Overwrite one block in place (a single-block mutation; bumps the version)."""
    desc = session.desc(mid)
    data = convert_precision(np.asarray(data), desc.precision)
    if data.shape != block_extent(desc.layout.grid, coord):
        raise ShapeError(f"block {coord} is {block_extent(desc.layout.grid, coord)}, got {data.shape}")
    owner = desc.layout.owner(coord)
    blk = BlockBuffer(coord, data, desc.precision, Provenance.TRANSIT, mid, desc.version + 1)
    session.transport.send_block_async(MASTER, owner, blk, "write_block")
    session.execute(OpCode.WRITE_BLOCK, {"id": mid, "coord": coord}, effects=[("bump", mid)])


@handles(OpCode.WRITE_BLOCK)
def _write_block(worker: Worker, args):
    mid, coord = args["id"], tuple(args["coord"])
    if worker.desc(mid).layout.owner(coord) != worker.id:
        return None

    def body():
        msg = yield worker.transport.recv_async(worker.id, MASTER)
        blk = worker.block(mid, coord)
        blk.data[...] = msg.data
        blk.version_seen = worker.desc(mid).version
    return body()


def gather(session: Session, mid: int, tag: str = "gather") -> np.ndarray:
    desc = session.desc(mid)
    session.host_window["__adjacent__"] = session.master_adjacent_worker
    session.execute(OpCode.GATHER, {"id": mid, "tag": tag})
    return _assemble_at_master(session, desc)


def _assemble_at_master(session: Session, desc: MatrixDescriptor) -> np.ndarray:
    out = np.empty(desc.shape, dtype=desc.precision.dtype.newbyteorder("="))
    grid = desc.layout.grid
    t = session.transport
    for coord in grid.coords():
        owner = desc.layout.owner(coord)
        if owner == session.master_adjacent_worker:
            blk = session.host_window.pop((desc.matrix_id, coord))
        else:
            blk = t.wait(t.recv_async(MASTER, owner), 0 if session.deterministic else session.timeout)
        out[grid.slices(coord)] = blk.data
    return out


@handles(OpCode.GATHER)
def _gather(worker: Worker, args):
    mid = args["id"]
    for coord in worker.my_blocks(mid):
        blk = worker.block(mid, coord)
        if worker.id == _adjacent(worker):
            worker.host_window[(mid, coord)] = BlockBuffer(coord, blk.data.copy(), blk.precision,
                                                           Provenance.TRANSIT, mid)
        else:
            worker.transport.send_block_async(worker.id, MASTER, blk, args["tag"])


def shutdown(session: Session) -> dict[int, dict]:
    if not session.alive:
        return {}
    ids = sorted(session.descriptors)
    session.execute(OpCode.SHUTDOWN, {"ids": ids}, effects=[("drop", m) for m in ids])
    session.alive = False
    for q in session._inboxes:
        q.put(None)
    for t in session._threads:
        t.join(timeout=session.timeout)
    for w in session.workers:
        w.close()
    return session.pool_stats()


@handles(OpCode.SHUTDOWN)
def _shutdown(worker: Worker, args):
    for fut in list(worker.loads.values()):
        fut.result()
    worker.loads.clear()
    for mid in {k[0] for store in (worker.owned, worker.cache, worker.replicas) for k in store}:
        worker.drop_matrix(mid)
    worker.pool.trim()
    return worker.pool.snapshot()


# --- datasets and prefetch ------------------------------------------------------


def register_dataset(session: Session, config: DatasetConfig) -> int:
    handle = next(session._dataset_ids)
    session.execute(OpCode.REGISTER_DATASET, {"handle": handle, "config": config})
    session._cursors[handle] = 0
    session._dataset_cfgs[handle] = config
    return handle


@handles(OpCode.REGISTER_DATASET)
def _register(worker: Worker, args):
    worker.datasets[args["handle"]] = args["config"]


def batch_layout(config: DatasetConfig, worker_count: int) -> LayoutSpec:
    rows_per = -(-config.batch_size // worker_count)
    return make_layout(LayoutKind.ROW_BLOCKS_1D, config.batch_size, config.feature_dim,
                       rows_per, config.feature_dim, worker_count)


def prefetch_next_batch(session: Session, dataset: int,
                        precision: Precision = Precision.SINGLE32) -> int:
    """Start loading the next batch; each owner reads its own rows from its shard."""
    config = session._dataset_cfgs[dataset]
    batch = session._cursors[dataset]
    if batch >= config.n_batches:
        raise EndOfData(f"dataset {dataset} exhausted after {batch} batches")
    session._cursors[dataset] = batch + 1
    mid = session.new_matrix_id()
    desc = MatrixDescriptor(mid, batch_layout(config, session.worker_count), precision, seed=config.seed)
    session.execute(OpCode.PREFETCH, {"id": mid, "dataset": dataset, "batch": batch},
                    effects=[("put", desc.to_record())])
    return mid


@handles(OpCode.PREFETCH)
def _prefetch(worker: Worker, args):
    mid = args["id"]
    desc = worker.desc(mid)
    config = worker.datasets[args["dataset"]]
    indices = config.batch_indices(args["batch"])
    blocks = []
    for coord in worker.my_blocks(mid):
        shape = block_extent(desc.layout.grid, coord)
        blk = worker.alloc_block(mid, coord, shape, desc.precision, Provenance.OWNED)
        worker.owned[(mid, coord)] = blk
        blocks.append(blk)

    def load():
        grid = desc.layout.grid
        for blk in blocks:
            lo, hi = grid.row_range(blk.coord[0])
            blk.data[...] = convert_precision(config.rows(indices[lo:hi]), desc.precision)

    if worker._loader is None:
        load()
    else:
        worker.loads[mid] = worker._loader.submit(load)


# --- checkpoint / restore ---------------------------------------------------------

MAGIC = b"DMTH"
FORMAT_VERSION = 1
_PRECISION_CODES = {p: i for i, p in enumerate(Precision)}


def _checksum(body: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")


def checkpoint(session: Session, path: str | Path) -> Path:
    """Snapshot every descriptor and owned block to ``path``."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIQQI", FORMAT_VERSION, session.worker_count, session.root_seed,
                       session._next_id, len(session.descriptors))
    for mid in sorted(session.descriptors):
        desc = session.descriptors[mid]
        session.execute(OpCode.GATHER, {"id": mid, "tag": "checkpoint"})
        host = _assemble_at_master(session, desc)
        layout = desc.layout.to_text().encode()
        out += struct.pack("<QI", mid, len(layout)) + layout
        out += struct.pack("<BBQQ", _PRECISION_CODES[desc.precision], desc.replicated,
                           desc.version, desc.seed)
        grid = desc.layout.grid
        order = sorted(grid.coords(), key=lambda c: (desc.layout.owner(c), c))
        out += struct.pack("<I", len(order))
        for coord in order:
            data = np.ascontiguousarray(host[grid.slices(coord)], dtype=desc.precision.dtype)
            payload = data.tobytes()
            out += struct.pack("<IIIIIQ", desc.layout.owner(coord), coord[0], coord[1],
                               data.shape[0], data.shape[1], len(payload))
            out += payload
    out += struct.pack("<Q", _checksum(bytes(out)))
    path = Path(path)
    path.write_bytes(bytes(out))
    return path


def read_checkpoint(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (stored,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if _checksum(body) != stored:
        raise IntegrityError("checkpoint checksum mismatch")
    off = 4
    fmt, workers, root, next_id, n = struct.unpack_from("<IIQQI", body, off)
    if fmt != FORMAT_VERSION:
        raise FormatVersionError(f"checkpoint format {fmt}, expected {FORMAT_VERSION}")
    off += struct.calcsize("<IIQQI")
    precisions = list(Precision)
    matrices = []
    for _ in range(n):
        mid, ln = struct.unpack_from("<QI", body, off)
        off += 12
        layout = LayoutSpec.from_text(body[off:off + ln].decode())
        off += ln
        pcode, repl, version, seed = struct.unpack_from("<BBQQ", body, off)
        off += struct.calcsize("<BBQQ")
        (nblocks,) = struct.unpack_from("<I", body, off)
        off += 4
        prec = precisions[pcode]
        host = np.empty(layout.grid.shape, dtype=prec.dtype)
        for _ in range(nblocks):
            owner, bi, bj, r, c, nbytes = struct.unpack_from("<IIIIIQ", body, off)
            off += struct.calcsize("<IIIIIQ")
            host[layout.grid.slices((bi, bj))] = np.frombuffer(body, prec.dtype, r * c, off).reshape(r, c)
            off += nbytes
        matrices.append((MatrixDescriptor(mid, layout, prec, bool(repl), version, seed), host))
    return {"worker_count": workers, "root_seed": root, "next_id": next_id, "matrices": matrices}


def restore(path: str | Path, topology: Topology | None = None,
            cost_model: CostModel | None = None, **kwargs) -> Session:
    image = read_checkpoint(path)
    session = Session(image["worker_count"], topology, cost_model, image["root_seed"], **kwargs)
    for desc, host in image["matrices"]:
        create_matrix(session, desc.layout, desc.precision, FILL_HOST, host, seed=desc.seed,
                      version=desc.version, replicated=desc.replicated, matrix_id=desc.matrix_id)
    session._next_id = image["next_id"]
    return session

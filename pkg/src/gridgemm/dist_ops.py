"""Distributed operations.

Each public function validates on the master, then issues one command.
The matching ``@handles`` function is the per-worker body; it is a
generator whenever the worker has to wait on transfers.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .core import (BlockBuffer, Coord, LayoutError, LayoutKind, LayoutSpec, MatrixDescriptor,
                   Precision, Provenance, block_extent, make_layout)
from .kernels import (PrecisionMismatchError, ShapeError, convert_precision, gemm_accumulate,
                      gemm_finalize, local_gemm, local_row_col_sums)
from .runtime import AnyOf, OpCode, RuntimeStateError, Session, Worker, handles
from .schedule import CyclicPlan, stage_tag


class CacheMissError(RuntimeError):
    def __init__(self, matrix_id: int, coords):
        self.matrix_id = matrix_id
        self.coords = sorted(coords)
        super().__init__(f"matrix {matrix_id}: blocks {self.coords} missing or stale in cache")


def _op_shape(desc: MatrixDescriptor, trans: bool) -> tuple[int, int]:
    r, c = desc.shape
    return (c, r) if trans else (r, c)


def _check_gemm(session: Session, a: int, b: int, c: int, trans_a: bool, trans_b: bool):
    da, db, dc = session.desc(a), session.desc(b), session.desc(c)
    if len({a, b, c}) != 3:
        raise ValueError("GEMM operands must be distinct matrices")
    (m, k), (k2, n) = _op_shape(da, trans_a), _op_shape(db, trans_b)
    if k != k2 or dc.shape != (m, n):
        raise ShapeError(f"op(A) {m}x{k}, op(B) {k2}x{n} and C {dc.shape} do not conform")
    if len({da.precision, db.precision, dc.precision}) != 1:
        raise PrecisionMismatchError("GEMM operands must share one precision")
    if dc.replicated:
        raise RuntimeStateError("GEMM output may not be replicated")
    return da, db, dc


# --- double buffering ---------------------------------------------------------


class DoubleBuffer:
    """Two pool buffers per inner block: compute/send read ``front`` while ``back`` receives."""

    def __init__(self, worker: Worker, shape, precision: Precision):
        self.worker = worker
        self.bufs = [worker.pool.array(shape, precision.dtype) for _ in range(2)]
        self.front_index = 0
        self.busy = False

    def receive(self, data: np.ndarray) -> np.ndarray:
        if self.busy:
            raise RuntimeStateError("receive into a back buffer that is still referenced")
        arr = self.bufs[1 - self.front_index][0][: data.shape[0], : data.shape[1]]
        arr[...] = data
        return arr

    def swap(self) -> None:
        self.front_index = 1 - self.front_index

    def release(self) -> None:
        for _, buf in self.bufs:
            self.worker.pool.release(buf)


# --- cyclic GEMM -----------------------------------------------------------------


def cyclic_plan_for(da: MatrixDescriptor, db: MatrixDescriptor, dc: MatrixDescriptor,
                    trans_b: bool, worker_count: int) -> CyclicPlan:
    """Raise ``LayoutError`` unless A/B/C line up with a ring schedule."""
    ca, cb, cc = da.layout, db.layout, dc.layout
    if ca.grid.n_block_cols != 1:
        raise LayoutError("A must be split into full-width block-rows; use general_gemm")
    if cc.grid.n_block_rows != 1:
        raise LayoutError("C must be split into full-height column panels; use general_gemm")
    if trans_b:
        ok = (cb.grid.n_block_cols == 1 and cb.grid.block_rows == cc.grid.block_cols
              and all(cb.owner((j, 0)) == cc.owner((0, j)) for j in range(cc.grid.n_block_cols)))
    else:
        ok = (cb.grid.n_block_rows == 1 and cb.grid.block_cols == cc.grid.block_cols
              and all(cb.owner((0, j)) == cc.owner((0, j)) for j in range(cc.grid.n_block_cols)))
    if not ok:
        raise LayoutError("op(B) panels must match C's column panels and owners; use general_gemm")
    return CyclicPlan.from_layout(ca, worker_count)


def _b_panel(worker: Worker, db: MatrixDescriptor, j: int, trans_b: bool) -> np.ndarray:
    blk = worker.block(db.matrix_id, (j, 0) if trans_b else (0, j))
    return blk.data.T if trans_b else blk.data


def cyclic_gemm(session: Session, alpha: float, a: int, b: int, beta: float, c: int,
                trans_a: bool = False, trans_b: bool = False, cache_a: bool = False,
                op_name: str = "cyclic_gemm") -> None:
    """C <- alpha*op(A)*op(B) + beta*C with A blocks rolling around the worker ring."""
    da, db, dc = _check_gemm(session, a, b, c, trans_a, trans_b)
    cyclic_plan_for(da, db, dc, trans_b, session.worker_count)
    opcode = OpCode.CYCLIC_GEMM if op_name == "cyclic_gemm" else OpCode.BROADCAST_GEMM
    session.execute(opcode, dict(alpha=alpha, a=a, b=b, c=c, beta=beta, trans_a=trans_a,
                                 trans_b=trans_b, cache_a=cache_a, op=op_name),
                    effects=[("bump", c)])


def broadcast_gemm_reference(session: Session, alpha: float, a: int, b: int, beta: float, c: int,
                             trans_a: bool = False, trans_b: bool = False) -> None:
    """Same product as ``cyclic_gemm``; each A block is sent from its owner to all workers."""
    cyclic_gemm(session, alpha, a, b, beta, c, trans_a, trans_b, False,
                op_name="broadcast_gemm_reference")


class _PanelUpdater:
    """Applies A blocks to this worker's C panels in a fixed global order.

    Without transA every A block fills its own rows of C, so blocks are
    independent. With transA each block contributes a slice of the inner
    dimension, so contributions are accumulated in ascending block-row
    order to match the sequential loop bit for bit.
    """

    def __init__(self, worker: Worker, args, da, db, dc):
        self.w, self.args = worker, args
        self.da, self.db, self.dc = da, db, dc
        self.alpha, self.beta = args["alpha"], args["beta"]
        self.trans_a, self.trans_b = args["trans_a"], args["trans_b"]
        self.panels = worker.my_blocks(dc.matrix_id)
        self.order = [c for c in da.layout.grid.coords()]
        self.next = 0
        self.pending: dict[Coord, BlockBuffer] = {}
        work = dc.precision.compute_dtype
        self.acc = {}
        if self.trans_a:
            for coord in self.panels:
                arr, buf = worker.pool.array(worker.block(dc.matrix_id, coord).data.shape, work)
                arr[...] = 0
                self.acc[coord] = (arr, buf)

    def apply(self, coord: Coord, data: np.ndarray, tag: str, owned: bool) -> None:
        if not self.trans_a:
            self._rows(coord, data, tag)
            return
        if self.order[self.next] != coord:
            # out of order: hold a private copy until the lower blocks have arrived
            arr, buf = self.w.pool.array(data.shape, data.dtype)
            arr[...] = data
            self.pending[coord] = BlockBuffer(coord, arr, self.da.precision, Provenance.TRANSIT,
                                              self.da.matrix_id, pool_buffer=buf)
            return
        self._inner(coord, data, tag)
        self.next += 1
        while self.next < len(self.order) and self.order[self.next] in self.pending:
            blk = self.pending.pop(self.order[self.next])
            self._inner(blk.coord, blk.data, tag)
            self.w.free_block(blk)
            self.next += 1

    def _rows(self, coord, data, tag):
        lo, hi = self.da.layout.grid.row_range(coord[0])
        for pc in self.panels:
            cblk = self.w.block(self.dc.matrix_id, pc)
            opb = _b_panel(self.w, self.db, pc[1], self.trans_b)
            local_gemm(self.alpha, data, opb, self.beta, cblk.data[lo:hi])
            self.w.log_compute(2.0 * data.size * opb.shape[1], tag)

    def _inner(self, coord, data, tag):
        lo, hi = self.da.layout.grid.row_range(coord[0])
        for pc in self.panels:
            opb = _b_panel(self.w, self.db, pc[1], self.trans_b)
            gemm_accumulate(self.acc[pc][0], data, opb[lo:hi], trans_a=True)
            self.w.log_compute(2.0 * data.size * opb.shape[1], tag)

    def finish(self) -> None:
        if self.trans_a:
            if self.next != len(self.order):
                raise RuntimeStateError(f"worker {self.w.id}: A blocks missing from the ring")
            for pc, (acc, buf) in self.acc.items():
                cblk = self.w.block(self.dc.matrix_id, pc)
                gemm_finalize(self.alpha, acc, self.beta, cblk.data)
                self.w.pool.release(buf)
        for pc in self.panels:
            self.w.block(self.dc.matrix_id, pc).version_seen = self.dc.version


def _cache_store(worker: Worker, da: MatrixDescriptor, coord: Coord, data: np.ndarray) -> None:
    key = (da.matrix_id, coord)
    old = worker.cache.get(key)
    if old is None or old.data.shape != data.shape:
        if old is not None:
            worker.free_block(old)
        old = worker.alloc_block(da.matrix_id, coord, data.shape, da.precision, Provenance.CACHED)
        worker.cache[key] = old
    old.data[...] = data
    old.version_seen = da.version


@handles(OpCode.CYCLIC_GEMM)
def _cyclic(worker: Worker, args):
    da, db, dc = (worker.desc(args[k]) for k in ("a", "b", "c"))
    plan = cyclic_plan_for(da, db, dc, args["trans_b"], worker.transport.worker_count)
    return _cyclic_body(worker, args, plan, da, db, dc)


def _cyclic_body(worker: Worker, args, plan: CyclicPlan, da, db, dc):
    w, t = worker.id, worker.transport
    P, B = plan.worker_count, plan.blocks_per_worker
    op = args["op"]
    if args["cache_a"]:
        worker.caching.add(da.matrix_id)
    grid = da.layout.grid
    bufs = [DoubleBuffer(worker, (grid.block_rows, grid.global_cols), da.precision) for _ in range(B)]
    updater = _PanelUpdater(worker, args, da, db, dc)
    recvs: dict[int, object] = {}
    sends: dict[int, object] = {}
    try:
        for o, i in plan.stages():
            coord = plan.held(w, o, i)
            # stage boundary: wait for the send that last read this block's front
            # buffer and the receive that filled its back buffer
            waits = [h for h in (sends.pop(i, None), recvs.pop(i, None)) if h is not None]
            got = yield waits
            if o < P - 1 and plan.held(w, o + 1, i) is not None:
                recvs[i] = t.recv_async(w, plan.predecessor(w))
            if coord is None:
                continue
            if o == 0:
                data = worker.block(da.matrix_id, coord).data
            else:
                msg = next(m for m in got if m is not None)
                if msg.coord != coord:
                    raise RuntimeStateError(f"worker {w}: expected A block {coord}, got {msg.coord}")
                data = bufs[i].receive(msg.data)
                bufs[i].swap()
            tag = stage_tag(op, o, i)
            if o < P - 1:
                bufs[i].busy = True
                prov = Provenance.OWNED if o == 0 else Provenance.TRANSIT
                blk = BlockBuffer(coord, data, da.precision, prov, da.matrix_id, da.version)
                sends[i] = t.send_block_async(w, plan.successor(w), blk, tag)
            updater.apply(coord, data, tag, o == 0)
            bufs[i].busy = False
            if args["cache_a"] and o > 0:
                _cache_store(worker, da, coord, data)
        leftover = [h for h in list(sends.values()) + list(recvs.values())]
        if leftover:
            yield leftover
        updater.finish()
    finally:
        for db_ in bufs:
            db_.release()


@handles(OpCode.BROADCAST_GEMM)
def _broadcast(worker: Worker, args):
    da, db, dc = (worker.desc(args[k]) for k in ("a", "b", "c"))
    cyclic_plan_for(da, db, dc, args["trans_b"], worker.transport.worker_count)
    return _broadcast_body(worker, args, da, db, dc)


def _broadcast_body(worker: Worker, args, da, db, dc):
    w, t, P = worker.id, worker.transport, worker.transport.worker_count
    updater = _PanelUpdater(worker, args, da, db, dc)
    for s, coord in enumerate(da.layout.grid.coords()):
        owner = da.layout.owner(coord)
        tag = f"{args['op']}:{s}"
        if owner == w:
            blk = worker.block(da.matrix_id, coord)
            for d in range(P):
                if d != w:
                    t.send_block_async(w, d, blk, tag)
            yield None
            data = blk.data
        else:
            data = (yield t.recv_async(w, owner)).data
        updater.apply(coord, data, tag, owner == w)
    updater.finish()


# --- cached backward GEMM ------------------------------------------------------------


def cached_backward_gemm(session: Session, w_id: int, dy_id: int, dx_id: int) -> None:
    """dX <- W dY using only owned and cached blocks of W. Never communicates."""
    dw, dy, dx = session.desc(w_id), session.desc(dy_id), session.desc(dx_id)
    if dw.shape[1] != dy.shape[0] or dx.shape != (dw.shape[0], dy.shape[1]):
        raise ShapeError(f"W {dw.shape} x dY {dy.shape} does not give dX {dx.shape}")
    if len({dw.precision, dy.precision, dx.precision}) != 1:
        raise PrecisionMismatchError("operands must share one precision")
    if dw.layout.grid.n_block_cols != 1 or dy.layout.grid.n_block_rows != 1 or dx.layout.grid.n_block_rows != 1:
        raise LayoutError("backward pass needs row-blocked W and column-panel dY/dX")
        # noqa
    if (dy.layout.grid.block_cols != dx.layout.grid.block_cols or
            dy.layout.assignment != dx.layout.assignment):
        raise LayoutError("dY and dX column panels must coincide")
    if dx.replicated:
        raise RuntimeStateError("GEMM output may not be replicated")
    missing = set()
    for found in session.execute(OpCode.CACHE_PROBE, {"w": w_id, "dx": dx_id}):
        missing.update(found)
    if missing:
        raise CacheMissError(w_id, missing)
    session.execute(OpCode.CACHED_BACKWARD_GEMM, {"w": w_id, "dy": dy_id, "dx": dx_id},
                    effects=[("bump", dx_id)])


def _w_source(worker: Worker, dw: MatrixDescriptor, coord: Coord) -> BlockBuffer | None:
    if dw.layout.owner(coord) == worker.id:
        return worker.block(dw.matrix_id, coord)
    blk = worker.cache.get((dw.matrix_id, coord))
    if blk is None or blk.is_stale(dw):
        return None
    return blk


@handles(OpCode.CACHE_PROBE)
def _cache_probe(worker: Worker, args):
    dw, dx = worker.desc(args["w"]), worker.desc(args["dx"])
    if not worker.my_blocks(dx.matrix_id):
        return []
    return [c for c in dw.layout.grid.coords() if _w_source(worker, dw, c) is None]


@handles(OpCode.CACHED_BACKWARD_GEMM)
def _backward(worker: Worker, args):
    dw, dy, dx = (worker.desc(args[k]) for k in ("w", "dy", "dx"))
    grid = dw.layout.grid
    for pc in worker.my_blocks(dx.matrix_id):
        out = worker.block(dx.matrix_id, pc)
        dyp = worker.block(dy.matrix_id, pc).data
        for coord in grid.coords():
            src = _w_source(worker, dw, coord)
            if src is None:
                raise CacheMissError(dw.matrix_id, [coord])
            lo, hi = grid.row_range(coord[0])
            local_gemm(1.0, src.data, dyp, 0.0, out.data[lo:hi])
            worker.log_compute(2.0 * src.data.size * dyp.shape[1], "cached_backward_gemm")
        out.version_seen = dx.version


def set_caching(session: Session, matrix_id: int, enabled: bool) -> None:
    """Disabling drops (and pools) every cached block of the matrix."""
    session.desc(matrix_id)
    session.execute(OpCode.SET_CACHING, {"id": matrix_id, "enabled": enabled})


@handles(OpCode.SET_CACHING)
def _set_caching(worker: Worker, args):
    if args["enabled"]:
        worker.caching.add(args["id"])
    else:
        worker.caching.discard(args["id"])
        worker.drop_cache(args["id"])


# --- general GEMM -----------------------------------------------------------------


def _stored_blocks(layout: LayoutSpec, rows: tuple[int, int], cols: tuple[int, int] | None,
                   trans: bool) -> list[Coord]:
    """Stored blocks of X covering op(X)[rows, cols] (cols=None means all)."""
    g = layout.grid
    # op(X) rows map to stored cols when transposed
    size_a, size_b = (g.block_cols, g.block_rows) if trans else (g.block_rows, g.block_cols)
    count_b = g.n_block_rows if trans else g.n_block_cols
    a_idx = range(rows[0] // size_a, (rows[1] - 1) // size_a + 1)
    b_idx = range(count_b) if cols is None else range(cols[0] // size_b, (cols[1] - 1) // size_b + 1)
    if trans:
        return sorted((j, i) for i in a_idx for j in b_idx)
    return [(i, j) for i in a_idx for j in b_idx]


def _general_needs(da, db, dc, trans_a, trans_b, worker: int) -> list[tuple[int, Coord]]:
    need = set()
    g = dc.layout.grid
    for pc in dc.layout.blocks_of(worker):
        rows, cols = g.row_range(pc[0]), g.col_range(pc[1])
        need.update((da.matrix_id, c) for c in _stored_blocks(da.layout, rows, None, trans_a))
        # op(B)[:, cols] is op(B)^T[cols, :]
        need.update((db.matrix_id, c) for c in _stored_blocks(db.layout, cols, None, not trans_b))
    return sorted(need)


def general_gemm(session: Session, alpha: float, a: int, b: int, beta: float, c: int,
                 trans_a: bool = False, trans_b: bool = False) -> None:
    """Layout-independent GEMM: each C owner pulls the A/B blocks it needs."""
    _check_gemm(session, a, b, c, trans_a, trans_b)
    session.execute(OpCode.GENERAL_GEMM, dict(alpha=alpha, a=a, b=b, c=c, beta=beta,
                                              trans_a=trans_a, trans_b=trans_b),
                    effects=[("bump", c)])


@handles(OpCode.GENERAL_GEMM)
def _general(worker: Worker, args):
    da, db, dc = (worker.desc(args[k]) for k in ("a", "b", "c"))
    return _general_body(worker, args, da, db, dc)


def _general_body(worker: Worker, args, da, db, dc):
    w, t, P = worker.id, worker.transport, worker.transport.worker_count
    ta, tb = args["trans_a"], args["trans_b"]
    descs = {da.matrix_id: da, db.matrix_id: db}
    for d in range(P):
        if d == w:
            continue
        for mid, coord in _general_needs(da, db, dc, ta, tb, d):
            if descs[mid].layout.owner(coord) == w:
                t.send_block_async(w, d, worker.block(mid, coord), "general_gemm")
    mine = _general_needs(da, db, dc, ta, tb, w)
    remote = [(mid, c) for mid, c in mine if descs[mid].layout.owner(c) != w]
    handles_ = [t.recv_async(w, descs[mid].layout.owner(c)) for mid, c in remote]
    got = (yield handles_) if handles_ else []
    scratch = {}
    try:
        for desc in (da, db):
            arr, buf = worker.pool.array(desc.shape, desc.precision.dtype)
            scratch[desc.matrix_id] = (arr, buf)
        for (mid, coord), blk in zip(remote, got):
            scratch[mid][0][descs[mid].layout.grid.slices(coord)] = blk.data
        for mid, coord in mine:
            if descs[mid].layout.owner(coord) == w:
                scratch[mid][0][descs[mid].layout.grid.slices(coord)] = worker.block(mid, coord).data
        A, B = scratch[da.matrix_id][0], scratch[db.matrix_id][0]
        g = dc.layout.grid
        for pc in worker.my_blocks(dc.matrix_id):
            rs, cs = g.slices(pc)
            opa = A[:, rs] if ta else A[rs, :]
            opb = B[cs, :] if tb else B[:, cs]
            cblk = worker.block(dc.matrix_id, pc)
            local_gemm(args["alpha"], opa, opb, args["beta"], cblk.data, ta, tb)
            cblk.version_seen = dc.version
            worker.log_compute(2.0 * cblk.data.size * (A.shape[0] if ta else A.shape[1]),
                               "general_gemm")
    finally:
        for _, buf in scratch.values():
            worker.pool.release(buf)


# --- replication ------------------------------------------------------------------


def replicate(session: Session, matrix_id: int, enable: bool) -> None:
    session.desc(matrix_id)
    session.execute(OpCode.REPLICATE, {"id": matrix_id, "enable": enable},
                    effects=[("replicated", (matrix_id, enable))])


@handles(OpCode.REPLICATE)
def _replicate(worker: Worker, args):
    mid = args["id"]
    if not args["enable"]:
        for key in [k for k in worker.replicas if k[0] == mid]:
            worker.free_block(worker.replicas.pop(key))
        return None
    desc = worker.desc(mid)
    wanted = {w: [c for c in desc.layout.grid.coords() if desc.layout.owner(c) != w]
              for w in range(worker.transport.worker_count)}
    return _refresh_body(worker, desc, wanted, "replicate")


def _refresh_body(worker: Worker, desc: MatrixDescriptor, wanted: dict, tag: str):
    """Owners send each wanted block to each reader; readers store Replica copies."""
    w, t, lay = worker.id, worker.transport, desc.layout
    for reader in sorted(wanted):
        if reader == w:
            continue
        for coord in wanted[reader]:
            if lay.owner(coord) == w:
                t.send_block_async(w, reader, worker.block(desc.matrix_id, coord), tag)
    mine = wanted.get(w, [])
    handles_ = [t.recv_async(w, lay.owner(c)) for c in mine]
    got = (yield handles_) if handles_ else []
    for coord, msg in zip(mine, got):
        key = (desc.matrix_id, coord)
        rep = worker.replicas.get(key)
        if rep is None:
            rep = worker.alloc_block(desc.matrix_id, coord, msg.data.shape, desc.precision,
                                     Provenance.REPLICA)
            worker.replicas[key] = rep
        rep.data[...] = msg.data
        rep.version_seen = desc.version


def read_replica(session: Session, matrix_id: int, worker: int) -> np.ndarray:
    """Full matrix as seen locally by ``worker``; stale replicas are refreshed first."""
    desc = session.desc(matrix_id)
    if not desc.replicated:
        raise RuntimeStateError(f"matrix {matrix_id} is not replicated")
    stale = session.execute(OpCode.REPLICA_PROBE, {"id": matrix_id})
    if stale[worker]:
        session.execute(OpCode.REPLICA_REFRESH, {"id": matrix_id, "wanted": {worker: stale[worker]}})
    return session.execute(OpCode.READ_REPLICA, {"id": matrix_id, "reader": worker})[worker]


@handles(OpCode.REPLICA_PROBE)
def _replica_probe(worker: Worker, args):
    desc = worker.desc(args["id"])
    out = []
    for c in desc.layout.grid.coords():
        if desc.layout.owner(c) == worker.id:
            continue
        rep = worker.replicas.get((desc.matrix_id, c))
        if rep is None or rep.is_stale(desc):
            out.append(c)
    return out


@handles(OpCode.REPLICA_REFRESH)
def _replica_refresh(worker: Worker, args):
    return _refresh_body(worker, worker.desc(args["id"]), args["wanted"], "replica_refresh")


@handles(OpCode.READ_REPLICA)
def _read_replica(worker: Worker, args):
    if worker.id != args["reader"]:
        return None
    desc = worker.desc(args["id"])
    out = np.empty(desc.shape, dtype=desc.precision.dtype)
    for c in desc.layout.grid.coords():
        src = worker.block(desc.matrix_id, c) if desc.layout.owner(c) == worker.id \
            else worker.replicas[(desc.matrix_id, c)]
        out[desc.layout.grid.slices(c)] = src.data
    return out


# --- reshape ----------------------------------------------------------------------


def reshape(session: Session, src: int, new_layout: LayoutSpec,
            new_precision: Precision | None = None, new_worker_set=None) -> int:
    """Copy ``src`` into a new matrix with another layout, precision or worker set.

    Elements keep their row-major order, so the global shape may change
    as long as the element count does not.
    """
    ds = session.desc(src)
    if new_worker_set is not None:
        members = sorted(set(new_worker_set))
        if not members:
            raise ValueError("worker set is empty")
        if not set(members) <= set(range(session.worker_count)):
            raise LayoutError(f"worker set {members} not within the session")
        if new_layout.worker_count > len(members):
            raise LayoutError("layout needs more workers than the worker set provides")
        new_layout = new_layout.remap_workers({i: m for i, m in enumerate(members)})
    if not new_layout.workers <= set(range(session.worker_count)):
        raise LayoutError("layout uses workers outside the session")
    (r, c), (r2, c2) = ds.shape, new_layout.grid.shape
    if r * c != r2 * c2:
        raise ShapeError(f"cannot reshape {r}x{c} into {r2}x{c2}")
    prec = new_precision or ds.precision
    mid = session.new_matrix_id()
    desc = MatrixDescriptor(mid, new_layout, prec)
    session.execute(OpCode.RESHAPE, {"src": src, "dst": mid}, effects=[("put", desc.to_record())])
    return mid


def _piece_plan(ds: MatrixDescriptor, dd: MatrixDescriptor):
    """For every destination block: source block -> flat positions (in dest block order)."""
    n_src = ds.shape[1]
    n_dst = dd.shape[1]
    out = {}
    for dcoord in dd.layout.grid.coords():
        rs, cs = dd.layout.grid.slices(dcoord)
        rr, cc = np.meshgrid(np.arange(rs.start, rs.stop), np.arange(cs.start, cs.stop), indexing="ij")
        flat = (rr * n_dst + cc).ravel()
        sr, sc = flat // n_src, flat % n_src
        sbr, sbc = sr // ds.layout.grid.block_rows, sc // ds.layout.grid.block_cols
        pieces = {}
        for scoord in sorted(set(zip(sbr.tolist(), sbc.tolist()))):
            mask = (sbr == scoord[0]) & (sbc == scoord[1])
            r0, c0 = ds.layout.grid.row_range(scoord[0])[0], ds.layout.grid.col_range(scoord[1])[0]
            pieces[scoord] = (np.flatnonzero(mask), sr[mask] - r0, sc[mask] - c0)
        out[dcoord] = pieces
    return out


@handles(OpCode.RESHAPE)
def _reshape(worker: Worker, args):
    ds, dd = worker.desc(args["src"]), worker.desc(args["dst"])
    return _reshape_body(worker, ds, dd)


def _reshape_body(worker: Worker, ds: MatrixDescriptor, dd: MatrixDescriptor):
    w, t = worker.id, worker.transport
    wire = ds.precision.narrower(dd.precision)
    plan = _piece_plan(ds, dd)
    # senders: pieces in (dest block, src block) order; per-pair FIFO keeps both sides aligned
    for dcoord, pieces in plan.items():
        dst = dd.layout.owner(dcoord)
        for scoord, (_, rows, cols) in pieces.items():
            if ds.layout.owner(scoord) != w or dst == w:
                continue
            vals = worker.block(ds.matrix_id, scoord).data[rows, cols]
            blk = BlockBuffer(dcoord, convert_precision(vals, wire).reshape(1, -1), wire,
                              Provenance.TRANSIT, dd.matrix_id, region=scoord)
            t.send_block_async(w, dst, blk, "reshape")
    incoming = []
    for dcoord in worker.my_blocks(dd.matrix_id):
        for scoord in plan[dcoord]:
            owner = ds.layout.owner(scoord)
            if owner != w:
                incoming.append((dcoord, scoord, t.recv_async(w, owner)))
    got = (yield [h for *_, h in incoming]) if incoming else []
    arrived = {(d, s): m for (d, s, _), m in zip(incoming, got)}
    for dcoord in worker.my_blocks(dd.matrix_id):
        shape = block_extent(dd.layout.grid, dcoord)
        blk = worker.alloc_block(dd.matrix_id, dcoord, shape, dd.precision, Provenance.OWNED)
        flat = blk.data.reshape(-1)
        for scoord, (pos, rows, cols) in plan[dcoord].items():
            if ds.layout.owner(scoord) == w:
                vals = worker.block(ds.matrix_id, scoord).data[rows, cols]
            else:
                vals = arrived[(dcoord, scoord)].data.reshape(-1)
            flat[pos] = convert_precision(vals, dd.precision)
        worker.owned[(dd.matrix_id, dcoord)] = blk


# --- row / column sums --------------------------------------------------------------


def sum_layout(desc: MatrixDescriptor, axis: int) -> LayoutSpec:
    g = desc.layout.grid
    if axis == 1:
        table = {(i, 0): desc.layout.owner((i, 0)) for i in range(g.n_block_rows)}
        return make_layout(LayoutKind.CUSTOM, g.global_rows, 1, g.block_rows, 1,
                           desc.layout.worker_count, table)
    table = {(0, j): desc.layout.owner((0, j)) for j in range(g.n_block_cols)}
    return make_layout(LayoutKind.CUSTOM, 1, g.global_cols, 1, g.block_cols,
                       desc.layout.worker_count, table)


def add_row_col_sum(session: Session, matrix_id: int, axis: int, deterministic: bool = True) -> int:
    """Row sums (axis=1, an Mx1 result) or column sums (axis=0, 1xN).

    With ``deterministic=False`` each segment owner adds partials in
    arrival order, so results may differ by reassociation rounding.
    """
    if axis not in (0, 1):
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    desc = session.desc(matrix_id)
    out = MatrixDescriptor(session.new_matrix_id(), sum_layout(desc, axis), desc.precision)
    session.execute(OpCode.ADD_ROW_COL_SUM, {"src": matrix_id, "dst": out.matrix_id, "axis": axis,
                                             "deterministic": deterministic},
                    effects=[("put", out.to_record())])
    return out.matrix_id


@handles(OpCode.ADD_ROW_COL_SUM)
def _row_col_sum(worker: Worker, args):
    return _sum_body(worker, worker.desc(args["src"]), worker.desc(args["dst"]),
                     args["axis"], args["deterministic"])


def _sum_body(worker: Worker, ds: MatrixDescriptor, dd: MatrixDescriptor, axis: int, det: bool):
    w, t, lay = worker.id, worker.transport, ds.layout
    work = Precision.of(ds.precision.compute_dtype)
    seg_of = (lambda c: c[0]) if axis == 1 else (lambda c: c[1])
    contributors = defaultdict(set)
    for c in lay.grid.coords():
        contributors[seg_of(c)].add(lay.owner(c))
    partial = {}
    for c in worker.my_blocks(ds.matrix_id):
        s = seg_of(c)
        partial[s] = local_row_col_sums(worker.block(ds.matrix_id, c).data, axis, partial.get(s))
    seg_owner = {s: dd.layout.owner((s, 0) if axis == 1 else (0, s)) for s in contributors}
    for s in sorted(partial):
        if seg_owner[s] != w:
            blk = BlockBuffer((s, 0), partial[s].reshape(1, -1), work, Provenance.TRANSIT, dd.matrix_id)
            t.send_block_async(w, seg_owner[s], blk, "add_row_col_sum")
    mine = sorted(s for s, o in seg_owner.items() if o == w)
    expected = {s: {o: t.recv_async(w, o) for o in sorted(contributors[s]) if o != w} for s in mine}
    for s in mine:
        parts = dict()
        if w in contributors[s]:
            parts[w] = partial[s]
        if det:
            if expected[s]:
                got = yield list(expected[s].values())
                parts.update({o: m.data.reshape(-1) for o, m in zip(expected[s], got)})
            total = None
            for o in sorted(parts):
                total = parts[o] if total is None else total + parts[o]
        else:
            total = parts.get(w)
            pending = list(expected[s].values())
            while pending:
                h, m = yield AnyOf(tuple(pending))
                pending.remove(h)
                v = m.data.reshape(-1)
                total = v if total is None else total + v
        coord = (s, 0) if axis == 1 else (0, s)
        shape = block_extent(dd.layout.grid, coord)
        blk = worker.alloc_block(dd.matrix_id, coord, shape, dd.precision, Provenance.OWNED)
        blk.data[...] = convert_precision(total, dd.precision).reshape(shape)
        worker.owned[(dd.matrix_id, coord)] = blk

"""In-process message transport plus a latency/bandwidth cost model.

Delivery is real (payload bytes are copied into the destination's
inbox); time is only modeled. Every send appends a ``TransferRecord`` so
tests can count and price communication after the fact.
"""
from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import math
import re
import threading
from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import MASTER, BlockBuffer, Coord, Precision, Provenance, WorkerId

HEADER_BYTES = 64
MB = 1 << 20


class TransportError(RuntimeError):
    pass


class RoutingError(TransportError):
    pass


class ProtocolError(TransportError):
    pass


class UsageError(TransportError):
    pass


class DeadlockError(TransportError):
    pass


class AbortedError(TransportError):
    pass


class ConfigError(ValueError):
    pass


class Medium(enum.Enum):
    SHARED_MEM_HOST = "shm_host"
    SHARED_MEM_DEVICE = "shm_device"
    INTRA_NODE_FABRIC = "intranode"
    INTER_NODE_FABRIC = "internode"
    PEER_TO_PEER = "p2p"

    @classmethod
    def parse(cls, text: str) -> "Medium":
        key = text.strip().lower()
        for m in cls:
            if key in (m.value, m.name.lower()):
                return m
        raise ConfigError(f"unknown medium {text!r}")


# Measured OSU latency (us) and bandwidth (MB/s) sample points per medium.
# The 0-byte latency row has no bandwidth partner and is left out.
TABLE_BYTES = (1, 128, 512, 16384, 524288, 2097152, 4194304)
TABLE_LATENCY_US = {
    Medium.SHARED_MEM_HOST: (1.11, 1.28, 1.54, 6.95, 138.61, 501.10, 971.19),
    Medium.SHARED_MEM_DEVICE: (31.70, 26.25, 26.20, 30.97, 163.39, 515.71, 936.43),
    Medium.INTRA_NODE_FABRIC: (6.13, 5.83, 12.00, 16.95, 218.72, 458.22, 765.36),
    Medium.INTER_NODE_FABRIC: (5.98, 5.77, 11.58, 16.74, 157.12, 425.37, 741.60),
    Medium.PEER_TO_PEER: (19.41, 15.51, 15.33, 17.50, 80.91, 279.04, 541.65),
}
TABLE_BANDWIDTH_MBPS = {
    Medium.SHARED_MEM_HOST: (1.76, 213.95, 679.82, 5269.01, 4540.58, 4901.57, 5064.01),
    Medium.SHARED_MEM_DEVICE: (0.06, 9.41, 37.60, 107.76, 4081.20, 5148.11, 5266.48),
    Medium.INTRA_NODE_FABRIC: (0.58, 69.99, 226.62, 3558.15, 5298.05, 7543.43, 7758.30),
    Medium.INTER_NODE_FABRIC: (0.68, 87.41, 268.72, 3922.10, 6110.80, 8105.62, 8657.90),
    Medium.PEER_TO_PEER: (0.13, 16.41, 67.28, 2336.16, 8984.97, 9604.57, 9720.82),
}


@dataclass(frozen=True)
class MediumTable:
    sizes: tuple[int, ...]
    latency_us: tuple[float, ...]
    bandwidth_mbps: tuple[float, ...]

    def _interp(self, values: Sequence[float], nbytes: float) -> float:
        # linear in log2(bytes), clamped outside the sampled range
        if nbytes <= self.sizes[0]:
            return values[0]
        if nbytes >= self.sizes[-1]:
            return values[-1]
        hi = bisect_left(self.sizes, nbytes)
        if self.sizes[hi] == nbytes:
            return values[hi]
        lo = hi - 1
        x0, x1 = math.log2(self.sizes[lo]), math.log2(self.sizes[hi])
        t = (math.log2(nbytes) - x0) / (x1 - x0)
        return values[lo] + t * (values[hi] - values[lo])

    def latency(self, nbytes: float) -> float:
        return self._interp(self.latency_us, nbytes)

    def bandwidth(self, nbytes: float) -> float:
        return self._interp(self.bandwidth_mbps, nbytes)

    def raw_time(self, nbytes: float) -> float:
        return self.latency(nbytes) + nbytes * 1e6 / (self.bandwidth(nbytes) * MB)


@dataclass
class CostModel:
    """Per-medium latency/bandwidth tables.

    With ``monotone=True`` the modeled time is the running maximum of the raw
    ``latency + bytes/bandwidth`` curve; the measured tables themselves are
    not monotone below a few tens of KiB.
    """

    tables: dict[Medium, MediumTable]
    monotone: bool = False
    _envelope: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_measurements(cls, monotone: bool = False) -> "CostModel":
        return cls({m: MediumTable(TABLE_BYTES, TABLE_LATENCY_US[m], TABLE_BANDWIDTH_MBPS[m])
                    for m in Medium}, monotone=monotone)

    def table(self, medium: Medium) -> MediumTable:
        try:
            return self.tables[medium]
        except KeyError:
            raise ConfigError(f"cost model has no table for {medium.value}") from None

    def latency_us(self, medium: Medium, nbytes: int) -> float:
        return self.table(medium).latency(nbytes)

    def bandwidth_mbps(self, medium: Medium, nbytes: int) -> float:
        return self.table(medium).bandwidth(nbytes)

    def time_us(self, medium: Medium, nbytes: int) -> float:
        if nbytes < 1:
            raise ValueError("modeled transfers carry at least one byte")
        tab = self.table(medium)
        raw = tab.raw_time(nbytes)
        if not self.monotone:
            return raw
        return max(raw, self._envelope_below(medium, tab, nbytes))

    def _envelope_below(self, medium: Medium, tab: MediumTable, nbytes: int) -> float:
        # exact running max over integer sizes: outside plateaus the raw curve
        # is already increasing, inside one the plateau value is used
        plateaus = self._envelope.get(medium)
        if plateaus is None:
            plateaus = self._envelope[medium] = _plateaus(tab)
        i = bisect_left(plateaus, (nbytes + 1,)) - 1
        if i >= 0:
            start, end, value = plateaus[i]
            if start <= nbytes <= end:
                return value
        return 0.0

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out)
        w.writerow(["medium", "bytes", "latency_us", "bandwidth_MBps"])
        for m, tab in self.tables.items():
            for row in zip(tab.sizes, tab.latency_us, tab.bandwidth_mbps):
                w.writerow([m.value, *row])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str, monotone: bool = False) -> "CostModel":
        rows: dict[Medium, list[tuple[int, float, float]]] = defaultdict(list)
        reader = csv.DictReader(io.StringIO(text))
        for lineno, row in enumerate(reader, start=2):
            try:
                rows[Medium.parse(row["medium"])].append(
                    (int(row["bytes"]), float(row["latency_us"]), float(row["bandwidth_MBps"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"cost model line {lineno}: {exc}") from None
        tables = {}
        for m, pts in rows.items():
            pts.sort()
            if any(p[0] < 1 for p in pts) or any(p[2] <= 0 for p in pts):
                raise ConfigError(f"{m.value}: sizes must be >= 1 and bandwidths positive")
            sizes, lat, bw = zip(*pts)
            tables[m] = MediumTable(tuple(sizes), tuple(lat), tuple(bw))
        return cls(tables, monotone=monotone)

    @classmethod
    def load(cls, path: str | Path, monotone: bool = False) -> "CostModel":
        return cls.from_csv(Path(path).read_text(), monotone=monotone)


def _plateaus(tab: MediumTable) -> list[tuple[int, int, float]]:
    xs = np.arange(1, tab.sizes[-1] + 1, dtype=np.float64)
    lx = np.log2(xs)
    raw = (np.interp(lx, np.log2(tab.sizes), tab.latency_us)
           + xs * 1e6 / (np.interp(lx, np.log2(tab.sizes), tab.bandwidth_mbps) * MB))
    env = np.maximum.accumulate(raw)
    below = np.flatnonzero(raw < env)
    out: list[tuple[int, int, float]] = []
    if below.size == 0:
        return out
    breaks = np.flatnonzero(np.diff(below) > 1)
    for seg in np.split(below, breaks + 1):
        start = int(seg[0])  # index of the first size below the max; size = index + 1
        value = max(tab.raw_time(start), float(env[seg[0]]))
        end = int(seg[-1]) + 1
        while end + 1 <= tab.sizes[-1] and tab.raw_time(end + 1) < value:
            end += 1
        out.append((start + 1, end, value))
    return out


def modeled_time(cost_model: CostModel, medium: Medium, nbytes: int) -> float:
    return cost_model.time_us(medium, nbytes)


@dataclass
class Topology:
    """Static pair -> medium map: same group is P2P, same node crosses the
    intra-node fabric, anything else goes inter-node. The master talks to
    workers through host shared memory."""

    groups: dict[int, tuple[WorkerId, ...]]
    nodes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    links: dict[frozenset, Medium] = field(default_factory=dict)

    def __post_init__(self):
        seen: dict[WorkerId, int] = {}
        for gid, members in self.groups.items():
            for w in members:
                if w in seen:
                    raise ConfigError(f"worker {w} listed in groups {seen[w]} and {gid}")
                seen[w] = gid
        self._group_of = seen
        gnode: dict[int, int] = {}
        for nid, gids in self.nodes.items():
            for g in gids:
                if g in gnode:
                    raise ConfigError(f"group {g} listed in nodes {gnode[g]} and {nid}")
                gnode[g] = nid
        self._node_of = gnode

    @property
    def workers(self) -> frozenset[WorkerId]:
        return frozenset(self._group_of)

    @classmethod
    def default(cls, worker_count: int, group_size: int = 4, groups_per_node: int = 2) -> "Topology":
        groups = {}
        for g, start in enumerate(range(0, worker_count, group_size)):
            groups[g] = tuple(range(start, min(start + group_size, worker_count)))
        nodes = {n: tuple(range(s, min(s + groups_per_node, len(groups))))
                 for n, s in enumerate(range(0, len(groups), groups_per_node))}
        return cls(groups, nodes)

    @classmethod
    def single_group(cls, worker_count: int) -> "Topology":
        return cls({0: tuple(range(worker_count))}, {0: (0,)})

    @classmethod
    def parse(cls, text: str) -> "Topology":
        groups: dict[int, tuple[int, ...]] = {}
        nodes: dict[int, tuple[int, ...]] = {}
        links: dict[frozenset, Medium] = {}
        pat = re.compile(r"^\s*(group|node|link)\s+([\d\s,]+?)\s*:\s*(.*?)\s*$")
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0]
            if not line.strip():
                continue
            m = pat.match(line)
            if not m:
                raise ConfigError(f"topology line {lineno}: cannot parse {line.strip()!r}")
            kind, head, rest = m.groups()
            try:
                ids = [int(x) for x in head.replace(",", " ").split()]
                if kind == "link":
                    if len(ids) != 2:
                        raise ValueError("link needs two worker ids")
                    links[frozenset(ids)] = Medium.parse(rest)
                    continue
                members = tuple(int(x) for x in rest.replace(",", " ").split())
            except ValueError as exc:
                raise ConfigError(f"topology line {lineno}: {exc}") from None
            target = groups if kind == "group" else nodes
            if ids[0] in target:
                raise ConfigError(f"topology line {lineno}: {kind} {ids[0]} defined twice")
            target[ids[0]] = members
        return cls(groups, nodes, links)

    @classmethod
    def load(cls, path: str | Path) -> "Topology":
        return cls.parse(Path(path).read_text())

    def to_text(self) -> str:
        lines = [f"group {g}: {' '.join(map(str, ws))}" for g, ws in sorted(self.groups.items())]
        lines += [f"node {n}: {' '.join(map(str, gs))}" for n, gs in sorted(self.nodes.items())]
        lines += [f"link {' '.join(map(str, sorted(k)))}: {m.value}" for k, m in self.links.items()]
        return "\n".join(lines) + "\n"

    def validate(self, worker_count: int) -> None:
        missing = set(range(worker_count)) - self.workers
        if missing:
            raise ConfigError(f"workers {sorted(missing)} are not in any topology group")

    def medium(self, a: WorkerId, b: WorkerId) -> Medium:
        if a == MASTER or b == MASTER:
            return Medium.SHARED_MEM_HOST
        key = frozenset((a, b))
        if key in self.links:
            return self.links[key]
        ga, gb = self._group_of.get(a), self._group_of.get(b)
        if ga is None or gb is None:
            raise RoutingError(f"no route between {a} and {b}")
        if ga == gb:
            return Medium.PEER_TO_PEER
        na, nb = self._node_of.get(ga, ("g", ga)), self._node_of.get(gb, ("g", gb))
        return Medium.INTRA_NODE_FABRIC if na == nb else Medium.INTER_NODE_FABRIC


@dataclass(frozen=True)
class TransferRecord:
    sequence: int
    src: WorkerId
    dst: WorkerId
    bytes: int
    medium: Medium
    modeled_time: float
    op_tag: str
    payload_bytes: int = 0
    matrix_id: int = -1
    coord: Coord | None = None

    def to_json(self) -> str:
        return json.dumps({"seq": self.sequence, "src": self.src, "dst": self.dst,
                           "bytes": self.bytes, "medium": self.medium.value,
                           "time_us": round(self.modeled_time, 6), "op_tag": self.op_tag})


@dataclass
class Message:
    src: WorkerId
    dst: WorkerId
    matrix_id: int
    coord: Coord
    version: int
    precision: Precision
    shape: tuple[int, int]
    region: tuple[int, int, int, int] | None
    payload: bytes
    tag: str
    seq: int = 0


@dataclass(eq=False)
class TransferHandle:
    kind: str  # "send" or "recv"
    src: WorkerId
    dst: WorkerId
    index: int = 0
    record: TransferRecord | None = None
    consumed: bool = False


class Transport:
    """FIFO point-to-point channels between workers (and the master)."""

    def __init__(self, worker_count: int, topology: Topology | None = None,
                 cost_model: CostModel | None = None, header_bytes: int = HEADER_BYTES):
        self.worker_count = worker_count
        self.topology = topology or Topology.default(worker_count)
        self.topology.validate(worker_count)
        self.cost_model = cost_model or CostModel.from_measurements()
        self.header_bytes = header_bytes
        self.records: list[TransferRecord] = []
        self.fault_flip_next = False
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._inbox: dict[tuple[int, int], dict[int, Message]] = defaultdict(dict)
        self._sent: dict[tuple[int, int], int] = defaultdict(int)
        self._posted: dict[tuple[int, int], int] = defaultdict(int)
        self._abort: BaseException | None = None

    def _check_endpoint(self, w: WorkerId) -> None:
        if w != MASTER and not 0 <= w < self.worker_count:
            raise RoutingError(f"unknown endpoint {w}")

    def send_block_async(self, src: WorkerId, dst: WorkerId, block: BlockBuffer,
                         op_tag: str) -> TransferHandle:
        self._check_endpoint(src)
        self._check_endpoint(dst)
        if src == dst:
            raise ProtocolError(f"worker {src} cannot send to itself")
        if block.provenance not in (Provenance.OWNED, Provenance.TRANSIT):
            raise ProtocolError(f"cannot send a {block.provenance.value} block")
        data = np.ascontiguousarray(block.data, dtype=block.precision.dtype)
        if data.size == 0:
            raise ProtocolError("zero-length block")
        payload = data.tobytes()
        medium = self.topology.medium(src, dst)
        wire = len(payload) + self.header_bytes
        with self._cond:
            if self.fault_flip_next:
                self.fault_flip_next = False
                flipped = bytearray(payload)
                flipped[0] ^= 0xFF
                payload = bytes(flipped)
            rec = TransferRecord(next(self._seq), src, dst, wire, medium,
                                 self.cost_model.time_us(medium, wire), op_tag,
                                 len(payload), block.matrix_id, block.coord)
            self.records.append(rec)
            key = (src, dst)
            self._inbox[key][self._sent[key]] = Message(
                src, dst, block.matrix_id, block.coord, block.version_seen, block.precision,
                data.shape, block.region, payload, op_tag, rec.sequence)
            self._sent[key] += 1
            self._cond.notify_all()
        return TransferHandle("send", src, dst, record=rec)

    def recv_async(self, dst: WorkerId, src: WorkerId) -> TransferHandle:
        self._check_endpoint(src)
        self._check_endpoint(dst)
        with self._cond:
            key = (src, dst)
            idx = self._posted[key]
            self._posted[key] += 1
        return TransferHandle("recv", src, dst, index=idx)

    def ready(self, handle: TransferHandle) -> bool:
        if handle.kind == "send":
            return True
        return handle.index in self._inbox.get((handle.src, handle.dst), {})

    def _take(self, handle: TransferHandle):
        if handle.consumed:
            raise UsageError("handle already awaited")
        handle.consumed = True
        if handle.kind == "send":
            return None
        msg = self._inbox[(handle.src, handle.dst)].pop(handle.index)
        data = np.frombuffer(msg.payload, dtype=msg.precision.dtype).reshape(msg.shape).copy()
        return BlockBuffer(msg.coord, data, msg.precision, Provenance.TRANSIT,
                           msg.matrix_id, msg.version, msg.region)

    def wait(self, handle: TransferHandle, timeout: float | None = None):
        """Block until ``handle`` completes; receives return the delivered block."""
        with self._cond:
            if handle.consumed:
                raise UsageError("handle already awaited")
            ok = self._cond.wait_for(lambda: self._abort is not None or self.ready(handle),
                                     timeout=timeout)
            if self._abort is not None and not self.ready(handle):
                raise AbortedError("transport aborted") from self._abort
            if not ok:
                raise DeadlockError(f"no message {handle.src}->{handle.dst} #{handle.index}"
                                    f" after {timeout}s")
            return self._take(handle)

    def wait_any(self, handles: Sequence[TransferHandle], timeout: float | None = None):
        """Return ``(handle, value)`` for the first ready handle in arrival order."""
        pending = [h for h in handles if not h.consumed]
        if not pending:
            raise UsageError("no pending handles")
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._abort is not None or any(self.ready(h) for h in pending),
                timeout=timeout)
            if not ok:
                raise DeadlockError("no pending handle completed before timeout")
            ready = [h for h in pending if self.ready(h)]
            if not ready:
                raise AbortedError("transport aborted") from self._abort
            # earliest sequence number first, i.e. arrival order
            h = min(ready, key=self._arrival_key)
            return h, self._take(h)

    def _arrival_key(self, h: TransferHandle) -> int:
        if h.kind == "send":
            return -1
        return self._inbox[(h.src, h.dst)][h.index].seq

    def abort(self, exc: BaseException) -> None:
        with self._cond:
            self._abort = exc
            self._cond.notify_all()

    def reset_channels(self) -> None:
        """Drop undelivered messages and re-align channel counters (after a failed command)."""
        with self._cond:
            self._inbox.clear()
            keys = set(self._sent) | set(self._posted)
            for k in keys:
                n = max(self._sent[k], self._posted[k])
                self._sent[k] = self._posted[k] = n
            self._abort = None

    def pending_messages(self) -> int:
        with self._cond:
            return sum(len(v) for v in self._inbox.values())

    def trace_dump(self) -> list[TransferRecord]:
        with self._cond:
            return list(self.records)

    def mark(self) -> int:
        return len(self.records)

    def since(self, mark: int) -> list[TransferRecord]:
        with self._cond:
            return self.records[mark:]


def trace_dump(transport: Transport) -> list[TransferRecord]:
    return transport.trace_dump()


def write_trace(records: Iterable[TransferRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")

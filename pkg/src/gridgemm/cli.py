"""Command-line harness: correctness suite, cyclic vs broadcast comparison, scaling sweep.

Reports are JSON lines. The exit code is 0 only when every check passed.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import runtime as rt
from .core import LayoutKind, Precision, make_layout
from .dist_ops import (CacheMissError, add_row_col_sum, broadcast_gemm_reference, cached_backward_gemm,
                       cyclic_gemm, general_gemm, read_replica, replicate, reshape)
from .kernels import reference_gemm
from .schedule import (DEFAULT_FLOPS_RATE, GemmGeometry, broadcast_schedule, cyclic_schedule,
                       has_crossover, scaling_table, trace_schedule)
from .transport import ConfigError, CostModel, Topology, write_trace

log = logging.getLogger("gridgemm")

ALL_OPS = ("cyclic_gemm", "broadcast_gemm_reference", "general_gemm", "cached_backward_gemm",
           "reshape", "replicate", "add_row_col_sum", "checkpoint")
TOLERANCE = {Precision.DOUBLE64: 0.0, Precision.SINGLE32: 1e-5, Precision.HALF16: 5e-3}


@dataclass
class RunConfig:
    workers: int = 4
    topology: str | None = None
    cost_model: str | None = None
    sizes: tuple[int, ...] = (8, 16, 32)
    blocks: tuple[int, ...] = (2, 3)
    layout: str = "rowblocks"
    precision: str = "double"
    seed: int = 0
    ops: tuple[str, ...] = ALL_OPS
    deterministic: bool = True
    trace: str | None = None
    report: str | None = None
    inject_fault: bool = False
    flops_rate: float = DEFAULT_FLOPS_RATE

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("field 'workers': must be >= 1")
        if not self.sizes or min(self.sizes) < 1:
            raise ConfigError("field 'sizes': must be positive")
        if not self.blocks or min(self.blocks) < 1:
            raise ConfigError("field 'blocks': must be positive")
        for name in ("topology", "cost_model"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"field '{name}': file {path} does not exist")
        LayoutKind.parse(self.layout)
        Precision.parse(self.precision)
        bad = set(self.ops) - set(ALL_OPS)
        if bad:
            raise ConfigError(f"field 'ops': unknown operations {sorted(bad)}")

    def load_topology(self) -> Topology:
        return Topology.load(self.topology) if self.topology else Topology.default(self.workers)

    def load_cost_model(self) -> CostModel:
        return CostModel.load(self.cost_model) if self.cost_model else CostModel.from_measurements()


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def load_run_config(path: str | Path) -> RunConfig:
    """Read a ``[run]`` section of ``key = value`` lines into a RunConfig."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(Path(path).read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if "run" not in parser:
        raise ConfigError(f"{path}: missing [run] section")
    section = parser["run"]
    lines = _key_lines(Path(path))
    known = {f.name: f for f in fields(RunConfig)}
    cfg = RunConfig()
    for key, raw in section.items():
        where = f"{path}:{lines.get(key, '?')}"
        if key not in known:
            raise ConfigError(f"{where}: unknown field '{key}'")
        try:
            value = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: field '{key}': {exc}") from None
        setattr(cfg, key, value)
    try:
        cfg.validate()
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


def _key_lines(path: Path) -> dict[str, int]:
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if "=" in line and not line.lstrip().startswith(("#", ";", "[")):
            out[line.split("=", 1)[0].strip().lower()] = n
    return out


def _coerce(key: str, raw: str):
    if key in ("workers", "seed"):
        return int(raw)
    if key == "flops_rate":
        return float(raw)
    if key in ("sizes", "blocks"):
        return _int_list(raw)
    if key == "ops":
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if key in ("deterministic", "inject_fault"):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    return raw


# --- one case --------------------------------------------------------------------


@dataclass
class CaseResult:
    passed: bool
    max_error: float | None
    tolerance: float | None = None
    note: str = ""


def _rel_frob(got: np.ndarray, ref: np.ndarray) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    diff = np.linalg.norm(np.asarray(got, dtype=np.float64) - ref)
    scale = np.linalg.norm(ref)
    return float(diff / scale) if scale else float(diff)


def _gemm_check(got, ref, prec: Precision) -> CaseResult:
    tol = TOLERANCE[prec]
    if prec is Precision.DOUBLE64:
        err = float(np.max(np.abs(got - np.asarray(ref)))) if np.size(got) else 0.0
        return CaseResult(bool(np.array_equal(got, np.asarray(ref))), err, tol)
    err = _rel_frob(got, ref)
    return CaseResult(err <= tol, err, tol)


def _case_gemm(s: rt.Session, op: str, n: int, block: int, kind: LayoutKind, prec: Precision) -> CaseResult:
    P = s.worker_count
    a = rt.create_matrix(s, make_layout(kind, n, n, block, block, P), prec, rt.FILL_RANDOM)
    if op == "general_gemm":
        panel = make_layout(kind, n, n, block, block, P)
    else:
        panel = make_layout(LayoutKind.COL_BLOCKS_1D, n, n, n, block, P)
    b = rt.create_matrix(s, panel, prec, rt.FILL_RANDOM)
    c = rt.create_matrix(s, panel, prec, rt.FILL_RANDOM)
    A, B, C = rt.gather(s, a), rt.gather(s, b), rt.gather(s, c)
    if op == "general_gemm":
        general_gemm(s, 1.0, a, b, 0.5, c)
    else:
        # the ring needs full-width block-rows of A; other layouts are remapped first
        if s.desc(a).layout.grid.n_block_cols != 1:
            a = reshape(s, a, make_layout(LayoutKind.ROW_BLOCKS_1D, n, n, block, n, P))
        fn = cyclic_gemm if op == "cyclic_gemm" else broadcast_gemm_reference
        fn(s, 1.0, a, b, 0.5, c)
    ref = reference_gemm(1.0, A, B, 0.5, C)
    return _gemm_check(rt.gather(s, c), ref, prec)


def _case_backward(s: rt.Session, n: int, block: int, prec: Precision) -> CaseResult:
    P = s.worker_count
    w = rt.create_matrix(s, make_layout(LayoutKind.ROW_BLOCKS_1D, n, n, block, n, P), prec, rt.FILL_RANDOM)
    panel = make_layout(LayoutKind.COL_BLOCKS_1D, n, n, n, block, P)
    x = rt.create_matrix(s, panel, prec, rt.FILL_RANDOM)
    y = rt.create_matrix(s, panel, prec)
    dx = rt.create_matrix(s, panel, prec)
    cyclic_gemm(s, 1.0, w, x, 0.0, y, trans_a=True, cache_a=True)
    mark = s.transport.mark()
    cached_backward_gemm(s, w, y, dx)
    moved = len(s.transport.since(mark))
    W, Y = rt.gather(s, w), rt.gather(s, y)
    res = _gemm_check(rt.gather(s, dx), reference_gemm(1.0, W, Y, 0.0, np.zeros((n, n))), prec)
    res.passed = res.passed and moved == 0
    rt.write_block(s, w, (0, 0), np.zeros((min(block, n), n)))
    try:
        cached_backward_gemm(s, w, y, dx)
        res.passed, res.note = False, "stale cache not detected"
    except CacheMissError:
        pass
    return res


def _case_reshape(s: rt.Session, n: int, block: int, kind: LayoutKind, prec: Precision) -> CaseResult:
    P = s.worker_count
    src = rt.create_matrix(s, make_layout(kind, n, n, block, block, P), Precision.SINGLE32, rt.FILL_RANDOM)
    host = rt.gather(s, src)
    target = make_layout(LayoutKind.COL_BLOCKS_1D, n, n, n, block, max(1, P // 2))
    dst = reshape(s, src, target, prec, range(max(1, P // 2)))
    got = rt.gather(s, dst)
    want = host.astype(prec.dtype)
    ok = bool(np.array_equal(got, want))
    return CaseResult(ok, float(np.max(np.abs(got.astype(np.float64) - want.astype(np.float64)))), 0.0)


def _case_replicate(s: rt.Session, n: int, block: int, kind: LayoutKind, prec: Precision) -> CaseResult:
    P = s.worker_count
    m = rt.create_matrix(s, make_layout(kind, n, n, block, block, P), prec, rt.FILL_RANDOM)
    replicate(s, m, True)
    rt.write_block(s, m, (0, 0), np.ones((min(block, n), min(block, n))))
    truth = rt.gather(s, m)
    ok = all(np.array_equal(read_replica(s, m, w), truth) for w in range(P))
    replicate(s, m, False)
    return CaseResult(ok, 0.0 if ok else None, 0.0)


def sum_bound(x: np.ndarray, axis: int, prec: Precision) -> np.ndarray:
    """Reassociation bound gamma_n * sum|x| plus one rounding of the stored result."""
    u = 2.0 ** -53 if prec is Precision.DOUBLE64 else 2.0 ** -24
    store_u = {Precision.DOUBLE64: 2.0 ** -53, Precision.SINGLE32: 2.0 ** -24, Precision.HALF16: 2.0 ** -11}[prec]
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    gamma = n * u / (1 - n * u)
    exact = x.sum(axis=axis)
    return gamma * np.abs(x).sum(axis=axis) * (1 + store_u) + store_u * np.abs(exact)


def _case_sums(s: rt.Session, n: int, block: int, kind: LayoutKind, prec: Precision) -> CaseResult:
    P = s.worker_count
    m = rt.create_matrix(s, make_layout(kind, n, n, block, block, P), prec, rt.FILL_RANDOM)
    X = rt.gather(s, m)
    worst, ok = 0.0, True
    for axis in (0, 1):
        d1 = rt.gather(s, add_row_col_sum(s, m, axis, True)).ravel()
        d2 = rt.gather(s, add_row_col_sum(s, m, axis, True)).ravel()
        nd = rt.gather(s, add_row_col_sum(s, m, axis, False)).ravel()
        exact = X.astype(np.float64).sum(axis=axis)
        bound = sum_bound(X, axis, prec)
        for got in (d1, nd):
            err = np.abs(got.astype(np.float64) - exact)
            worst = max(worst, float(err.max()))
            ok = ok and bool(np.all(err <= bound))
        ok = ok and np.array_equal(d1, d2)
    return CaseResult(ok, worst, None, "bound: gamma_n*sum|x|")


def _case_checkpoint(s: rt.Session, n: int, block: int, kind: LayoutKind, prec: Precision,
                     workdir: Path) -> CaseResult:
    P = s.worker_count
    m = rt.create_matrix(s, make_layout(kind, n, n, block, block, P), prec, rt.FILL_RANDOM)
    path = rt.checkpoint(s, workdir / f"ckpt_{m}.bin")
    s2 = rt.restore(path, s.topology, s.cost_model, deterministic=s.deterministic)
    try:
        ok = all(np.array_equal(rt.gather(s, k), rt.gather(s2, k)) for k in s.descriptors)
    finally:
        rt.shutdown(s2)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    try:
        rt.read_checkpoint(path)
        ok, note = False, "flipped byte not detected"
    except rt.CheckpointError:
        note = ""
    path.unlink()
    return CaseResult(ok, 0.0 if ok else None, 0.0, note)


# --- suite ------------------------------------------------------------------------------


def _pool_report(s: rt.Session) -> dict:
    return {str(w.id): w.pool.stats.report() for w in s.workers}


def session_digest(s: rt.Session) -> str:
    """sha256 over every live matrix, gathered; equal digests mean bitwise-equal data."""
    h = hashlib.sha256()
    for mid in sorted(s.descriptors):
        h.update(str(mid).encode())
        h.update(rt.gather(s, mid, tag="digest").tobytes())
    return h.hexdigest()


def run_case(config: RunConfig, op: str, n: int, block: int, workdir: Path) -> dict:
    kind, prec = LayoutKind.parse(config.layout), Precision.parse(config.precision)
    seed = rt.split_seed(config.seed, n * 1000 + block)
    s = rt.init(config.workers, config.load_topology(), config.load_cost_model(), seed,
                deterministic=config.deterministic)
    mark, cmarks = s.transport.mark(), s.compute_marks()
    start = time.perf_counter()
    if config.inject_fault:
        s.transport.fault_flip_next = True
    try:
        if op in ("cyclic_gemm", "broadcast_gemm_reference", "general_gemm"):
            res = _case_gemm(s, op, n, block, kind, prec)
        elif op == "cached_backward_gemm":
            res = _case_backward(s, n, block, prec)
        elif op == "reshape":
            res = _case_reshape(s, n, block, kind, prec)
        elif op == "replicate":
            res = _case_replicate(s, n, block, kind, prec)
        elif op == "add_row_col_sum":
            res = _case_sums(s, n, block, kind, prec)
        else:
            res = _case_checkpoint(s, n, block, kind, prec, workdir)
    except Exception as exc:  # noqa: BLE001 - a failing case is reported, not fatal
        res = CaseResult(False, None, None, f"{type(exc).__name__}: {exc}")
    wall = time.perf_counter() - start
    records = s.transport.since(mark)
    computes = s.computes_since(cmarks)
    digest = session_digest(s) if s.alive else None
    report = {
        "op": op,
        "config": {"workers": config.workers, "size": n, "block": block, "layout": kind.value,
                   "precision": prec.label, "seed": config.seed,
                   "deterministic": config.deterministic},
        "wall_time_s": wall,
        "modeled_makespan_us": trace_schedule(records, computes, config.flops_rate).makespan,
        "transfer_count": len(records),
        "bytes_moved": sum(r.bytes for r in records),
        "pool": _pool_report(s),
        "max_error": res.max_error,
        "tolerance": res.tolerance,
        "passed": res.passed,
        "result_digest": digest,
    }
    if res.note:
        report["note"] = res.note
    if s.alive:
        rt.shutdown(s)
    report["_records"] = records
    return report


def run_suite(config: RunConfig, workdir: Path | None = None) -> tuple[list[dict], int]:
    """Run every (op, size, block) case; returns reports and the exit code."""
    config.validate()
    workdir = Path(workdir or Path.cwd())
    reports, records = [], []
    for op in config.ops:
        for n in config.sizes:
            for block in config.blocks:
                rep = run_case(config, op, n, block, workdir)
                records.extend(rep.pop("_records"))
                reports.append(rep)
                log.info("%s n=%d b=%d passed=%s", op, n, block, rep["passed"])
    if config.trace:
        write_trace(records, config.trace)
    if config.report:
        write_reports(reports, config.report)
    return reports, 0 if all(r["passed"] for r in reports) else 1


def write_reports(reports: Sequence[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def strip_wall_time(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "wall_time_s"}


# --- comparison and scaling ------------------------------------------------------


def compare_schedules(size: int, workers: int, cost: CostModel, topology: Topology | None = None,
                      flops_rate: float = DEFAULT_FLOPS_RATE, inner: int = 1,
                      precision: Precision = Precision.SINGLE32) -> list[dict]:
    topology = topology or Topology.single_group(workers)
    geo = GemmGeometry.square(size, workers, inner, precision)
    out = []
    for name, builder in (("cyclic_gemm", cyclic_schedule), ("broadcast_gemm_reference", broadcast_schedule)):
        sched = builder(geo, topology, cost, flops_rate)
        out.append({"op": name, "size": size, "workers": workers, "modeled_makespan_us": sched.makespan,
                    "transfer_count": sched.transfer_count,
                    "bytes_moved": sum(geo.wire_bytes(c) for c in geo.a_elems) * (workers - 1)})
    ok = out[0]["modeled_makespan_us"] <= out[1]["modeled_makespan_us"]
    for r in out:
        r["passed"] = ok
    return out


def emit_scaling_table(sizes: Sequence[int], worker_counts: Sequence[int], cost: CostModel,
                       flops_rate: float = DEFAULT_FLOPS_RATE) -> list[dict]:
    table = scaling_table(sizes, worker_counts, cost, flops_rate)
    rows = [asdict(e) for e in table]
    lo, hi = min(sizes), max(sizes)
    p_lo, p_hi = min(worker_counts), max(worker_counts)
    crossover = lo != hi and p_lo != p_hi and has_crossover(table, lo, hi, p_lo, p_hi)
    for r in rows:
        r["crossover"] = crossover
    return rows


def format_scaling(rows: Sequence[dict]) -> str:
    sizes = sorted({r["size"] for r in rows})
    ps = sorted({r["workers"] for r in rows})
    t = {(r["size"], r["workers"]): r["makespan_us"] for r in rows}
    lines = ["size".rjust(8) + "".join(f"P={p}".rjust(14) for p in ps)]
    for n in sizes:
        lines.append(str(n).rjust(8) + "".join(f"{t[(n, p)] / 1e6:14.4f}" for p in ps))
    return "\n".join(lines) + "\n(modeled seconds)"


# --- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridgemm", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="[run] section file; flags override it")
    p.add_argument("--workers", type=int)
    p.add_argument("--topology")
    p.add_argument("--cost-model")
    p.add_argument("--sizes", type=_int_list)
    p.add_argument("--size", type=int, help="single size (comparison mode)")
    p.add_argument("--blocks", type=_int_list)
    p.add_argument("--layout")
    p.add_argument("--precision", choices=["half", "single", "double"])
    p.add_argument("--seed", type=int)
    p.add_argument("--op", action="append", help="operation to run (repeatable)")
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--trace")
    p.add_argument("--report")
    p.add_argument("--compare", help="cyclic,broadcast")
    p.add_argument("--model", choices=["tables"], default="tables")
    p.add_argument("--scaling", action="store_true", help="emit the modeled scaling table")
    p.add_argument("--scaling-workers", type=_int_list, default=(1, 2, 4, 8))
    p.add_argument("--inject-fault", action="store_true")
    p.add_argument("--flops-rate", type=float)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    for name in ("workers", "topology", "cost_model", "sizes", "blocks", "layout", "precision",
                 "seed", "trace", "report", "flops_rate"):
        val = getattr(args, name)
        if val is not None:
            setattr(cfg, name, val)
    if args.size is not None:
        cfg.sizes = (args.size,)
    if args.op:
        cfg.ops = tuple(args.op)
    if args.deterministic:
        cfg.deterministic = True
    if args.inject_fault:
        cfg.inject_fault = True
    return cfg


def _emit(rows: Sequence[dict], path: str | None) -> None:
    if path:
        write_reports(rows, path)
    for r in rows:
        print(json.dumps(r, sort_keys=True))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        cfg.validate()
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    cost = cfg.load_cost_model()
    if args.compare:
        rows = []
        for n in cfg.sizes:
            rows += compare_schedules(n, cfg.workers, cost,
                                      Topology.load(cfg.topology) if cfg.topology else None,
                                      cfg.flops_rate)
        _emit(rows, cfg.report)
        return 0 if all(r["passed"] for r in rows) else 1
    if args.scaling:
        rows = emit_scaling_table(cfg.sizes, args.scaling_workers, cost, cfg.flops_rate)
        _emit(rows, cfg.report)
        print(format_scaling(rows), file=sys.stderr)
        return 0
    reports, code = run_suite(cfg)
    for r in reports:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['op']} n={r['config']['size']} b={r['config']['block']} "
              f"err={r['max_error']} transfers={r['transfer_count']}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())

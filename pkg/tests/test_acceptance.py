"""The ten acceptance criteria, one test each. Every test prints a PASS/FAIL line."""
import math
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from gridgemm import runtime as rt
from gridgemm.cli import RunConfig, run_suite, strip_wall_time, sum_bound
from gridgemm.core import LayoutKind, Precision, make_layout
from gridgemm.dist_ops import (CacheMissError, add_row_col_sum, broadcast_gemm_reference,
                               cached_backward_gemm, cyclic_gemm, general_gemm, reshape)
from gridgemm.kernels import convert_precision
from gridgemm.schedule import (GemmGeometry, broadcast_schedule, cyclic_schedule, has_crossover,
                               scaling_table)
from gridgemm.transport import CostModel, Medium, Topology
from oracles import HALF_POSITIVE, decode_half, round_to_half, triple_loop

KINDS = [LayoutKind.ROW_BLOCKS_1D, LayoutKind.COL_BLOCKS_1D, LayoutKind.ROW_CYCLIC_1D,
         LayoutKind.CHECKERBOARD_2D]
TRANSPOSES = [(False, False), (True, False), (False, True), (True, True)]


def verdict(n: int, name: str, ok: bool, elapsed: float, budget: float, detail: str = "") -> None:
    ok = bool(ok) and elapsed <= budget
    line = (f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {name}: {detail} "
            f"({elapsed:.2f}s, budget {budget:.0f}s)")
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# --- 1 -----------------------------------------------------------------------------


def _gemm_layouts(op, kind, P, block, a_shape, b_shape, c_shape, tb):
    if op == "general_gemm":
        return tuple(make_layout(kind, *shape, block, block, P) for shape in (a_shape, b_shape, c_shape))
    la = make_layout(kind, *a_shape, block, a_shape[1], P)
    lc = make_layout(kind, *c_shape, c_shape[0], block, P)
    if tb:
        owners = {(j, 0): lc.owner((0, j)) for j in range(lc.grid.n_block_cols)}
        lb = make_layout(LayoutKind.CUSTOM, *b_shape, block, b_shape[1], P, owners)
    else:
        lb = make_layout(kind, *b_shape, b_shape[0], block, P)
    return la, lb, lc


def _rel_frob(got, ref):
    ref = np.asarray(ref, dtype=np.float64)
    return float(np.linalg.norm(got.astype(np.float64) - ref) / max(np.linalg.norm(ref), 1e-300))


def test_criterion_01_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    ops = {"cyclic_gemm": cyclic_gemm, "broadcast_gemm_reference": broadcast_gemm_reference,
           "general_gemm": general_gemm}
    failures, cases, worst_single = [], 0, 0.0
    sessions = {P: rt.init(P) for P in (1, 2, 3, 4)}
    try:
        combo = 0
        for block in (1, 2, 3, 5):
            for P in (1, 2, 3, 4):
                for kind in KINDS:
                    for ta, tb in TRANSPOSES:
                        # dims drawn from 3..32; every 16th combination pins the extremes
                        if combo % 16 == 0:
                            m, k, n = (3, 32, 3) if combo % 32 == 0 else (32, 3, 32)
                        else:
                            m, k, n = (int(x) for x in rng.integers(3, 33, size=3))
                        combo += 1
                        a_shape = (k, m) if ta else (m, k)
                        b_shape = (n, k) if tb else (k, n)
                        A = rng.standard_normal(a_shape)
                        B = rng.standard_normal(b_shape)
                        C = rng.standard_normal((m, n))
                        alpha, beta = 1.5, -0.5
                        for prec in (Precision.DOUBLE64, Precision.SINGLE32):
                            Ap, Bp, Cp = (x.astype(prec.dtype) for x in (A, B, C))
                            ref = triple_loop(alpha, Ap.astype(float), Bp.astype(float), beta,
                                              Cp.astype(float), ta, tb)
                            s = sessions[P]
                            for name, fn in ops.items():
                                la, lb, lc = _gemm_layouts(name, kind, P, block, a_shape, b_shape, (m, n), tb)
                                ids = [rt.create_matrix(s, lay, prec, rt.FILL_HOST, data)
                                       for lay, data in ((la, Ap), (lb, Bp), (lc, Cp))]
                                fn(s, alpha, ids[0], ids[1], beta, ids[2], ta, tb)
                                got = rt.gather(s, ids[2])
                                cases += 1
                                if prec is Precision.DOUBLE64:
                                    ok = got.tolist() == ref
                                else:
                                    err = _rel_frob(got, ref)
                                    worst_single = max(worst_single, err)
                                    ok = err <= 1e-5
                                if not ok:
                                    failures.append((name, block, P, kind.value, ta, tb, prec.label, m, k, n))
                                for mid in ids:
                                    rt.destroy_matrix(s, mid)
    finally:
        for s in sessions.values():
            rt.shutdown(s)
    verdict(1, "oracle equivalence", not failures, time.perf_counter() - start, 120,
            f"{cases} cases, {len(failures)} failures, worst single rel-frob {worst_single:.2e}")


# --- 2 -----------------------------------------------------------------------------


def test_criterion_02_communication_free_backward():
    start = time.perf_counter()
    results = []
    for P in (2, 3, 4):
        s = rt.init(P)
        try:
            n = 3 * P
            w = rt.create_matrix(s, make_layout("rowblocks", n, n, 3, n, P), fill="random")
            panel = make_layout("colblocks", n, 2 * P, n, 2, P)
            x = rt.create_matrix(s, panel, fill="random")
            y, dx = rt.create_matrix(s, panel), rt.create_matrix(s, panel)
            cyclic_gemm(s, 1.0, w, x, 0.0, y, trans_a=True, cache_a=True)
            mark = s.transport.mark()
            cached_backward_gemm(s, w, y, dx)
            moved = len(s.transport.since(mark))
            rt.write_block(s, w, (0, 0), np.ones((3, n)))
            try:
                cached_backward_gemm(s, w, y, dx)
                missed = False
            except CacheMissError:
                missed = True
            results.append((P, moved, missed))
        finally:
            rt.shutdown(s)
    ok = all(moved == 0 and missed for _, moved, missed in results)
    verdict(2, "communication-free backward", ok, time.perf_counter() - start, 5,
            "; ".join(f"P={p}: {m} transfers, miss after mutation={x}" for p, m, x in results))


# --- 3 -----------------------------------------------------------------------------


def test_criterion_03_ring_transfer_count():
    start = time.perf_counter()
    rows = []
    for P in (2, 3, 4):
        for B in (1, 2, 3):
            s = rt.init(P)
            try:
                n = 2 * P * B
                a = rt.create_matrix(s, make_layout("rowblocks", n, 4, 2, 4, P), fill="random")
                b = rt.create_matrix(s, make_layout("colblocks", 4, P, 4, 1, P), fill="random")
                c = rt.create_matrix(s, make_layout("colblocks", n, P, n, 1, P))
                mark = s.transport.mark()
                cyclic_gemm(s, 1.0, a, b, 0.0, c)
                recs = s.transport.since(mark)
                ring = [r for r in recs if r.matrix_id == a]
                rows.append((P, B, len(ring), P * (P - 1) * B, len(recs) == len(ring)))
            finally:
                rt.shutdown(s)
    ok = all(got == want and clean for _, _, got, want, clean in rows)
    verdict(3, "ring transfer count", ok, time.perf_counter() - start, 5,
            ", ".join(f"P={p},B={b}:{g}/{w}" for p, b, g, w, _ in rows))


# --- 4 -----------------------------------------------------------------------------

# measured tables, transcribed independently: bytes -> (latency us, bandwidth MB/s) per medium
MEASURED_LATENCY = {
    1: (1.11, 31.70, 6.13, 5.98, 19.41),
    128: (1.28, 26.25, 5.83, 5.77, 15.51),
    512: (1.54, 26.20, 12.00, 11.58, 15.33),
    16384: (6.95, 30.97, 16.95, 16.74, 17.50),
    524288: (138.61, 163.39, 218.72, 157.12, 80.91),
    2097152: (501.10, 515.71, 458.22, 425.37, 279.04),
    4194304: (971.19, 936.43, 765.36, 741.60, 541.65),
}
MEASURED_BANDWIDTH = {
    1: (1.76, 0.06, 0.58, 0.68, 0.13),
    128: (213.95, 9.41, 69.99, 87.41, 16.41),
    512: (679.82, 37.60, 226.62, 268.72, 67.28),
    16384: (5269.01, 107.76, 3558.15, 3922.10, 2336.16),
    524288: (4540.58, 4081.20, 5298.05, 6110.80, 8984.97),
    2097152: (4901.57, 5148.11, 7543.43, 8105.62, 9604.57),
    4194304: (5064.01, 5266.48, 7758.30, 8657.90, 9720.82),
}
COLUMNS = (Medium.SHARED_MEM_HOST, Medium.SHARED_MEM_DEVICE, Medium.INTRA_NODE_FABRIC,
           Medium.INTER_NODE_FABRIC, Medium.PEER_TO_PEER)


def test_criterion_04_cost_model_fidelity():
    start = time.perf_counter()
    cm = CostModel.from_measurements()
    worst = 0.0
    for nbytes in MEASURED_LATENCY:
        for col, medium in enumerate(COLUMNS):
            lat, bw = MEASURED_LATENCY[nbytes][col], MEASURED_BANDWIDTH[nbytes][col]
            want_time = lat + nbytes * 1e6 / (bw * 2 ** 20)
            for got, want in ((cm.latency_us(medium, nbytes), lat), (cm.bandwidth_mbps(medium, nbytes), bw),
                              (cm.time_us(medium, nbytes), want_time)):
                worst = max(worst, abs(got - want) / want)
    verdict(4, "cost-model fidelity", worst <= 0.005, time.perf_counter() - start, 1,
            f"35 knots x 5 media, worst relative deviation {worst:.2e}")


# --- 5 -----------------------------------------------------------------------------


def test_criterion_05_schedule_comparison():
    start = time.perf_counter()
    cm = CostModel.from_measurements()
    rows = []
    for P in (2, 4, 8):
        for n in (2048, 4096):
            geo = GemmGeometry.square(n, P, 1, Precision.SINGLE32)
            smallest = min(geo.a_elems.values()) * 4
            topo = Topology.single_group(P)
            cyc = cyclic_schedule(geo, topo, cm).makespan
            bc = broadcast_schedule(geo, topo, cm).makespan
            rows.append((P, n, smallest >= 512 * 1024, cyc, bc))
    ok = all(big and c <= b for _, _, big, c, b in rows)
    verdict(5, "cyclic vs broadcast makespan", ok, time.perf_counter() - start, 5,
            ", ".join(f"P={p},n={n}: {c / 1e3:.1f}<= {b / 1e3:.1f} ms" for p, n, _, c, b in rows))


# --- 6 -----------------------------------------------------------------------------


def test_criterion_06_half_precision_transfer_saving():
    start = time.perf_counter()
    # exhaustive conversion oracle: every finite half survives the trip exactly,
    # and every midpoint between neighbours rounds as the pure-Python oracle says
    bits = np.arange(65536, dtype=np.uint16)
    finite = [b for b in bits.tolist() if not math.isnan(decode_half(b)) and not math.isinf(decode_half(b))]
    values = np.array([decode_half(b) for b in finite], dtype=np.float32)
    conv = convert_precision(values, Precision.HALF16)
    patterns_ok = conv.view(np.uint16).tolist() == finite
    mids = [(HALF_POSITIVE[i] + HALF_POSITIVE[i + 1]) / 2 for i in range(len(HALF_POSITIVE) - 1)]
    mids_ok = (convert_precision(np.array(mids, np.float32), Precision.HALF16).astype(float).tolist()
               == [round_to_half(float(np.float32(x))) for x in mids])

    P = 4
    s = rt.init(P)
    try:
        src = rt.create_matrix(s, make_layout("rowblocks", 16, 16, 4, 16, P), Precision.SINGLE32,
                               fill="random")
        host = rt.gather(s, src)
        target = make_layout("colblocks", 16, 16, 16, 4, P)
        m0 = s.transport.mark()
        same = reshape(s, src, target, Precision.SINGLE32)
        m1 = s.transport.mark()
        half = reshape(s, src, target, Precision.HALF16)
        full_bytes = sum(r.payload_bytes for r in s.transport.records[m0:m1])
        half_bytes = sum(r.payload_bytes for r in s.transport.since(m1))
        got = rt.gather(s, half).astype(float).ravel().tolist()
        values_ok = got == [round_to_half(float(x)) for x in host.ravel()]
        same_ok = np.array_equal(rt.gather(s, same), host)
    finally:
        rt.shutdown(s)
    ok = patterns_ok and mids_ok and values_ok and same_ok and 2 * half_bytes == full_bytes
    verdict(6, "half-precision reshape saving", ok, time.perf_counter() - start, 10,
            f"payload {half_bytes} vs {full_bytes} bytes, conversion oracle "
            f"{'ok' if patterns_ok and mids_ok else 'MISMATCH'}")


# --- 7 -----------------------------------------------------------------------------


def test_criterion_07_checkpoint_round_trip(tmp_path):
    start = time.perf_counter()
    bad = []
    detected = 0
    combos = 0
    for prec in Precision:
        for kind in KINDS:
            for P, block in ((2, 2), (3, 5), (4, 1)):
                s = rt.init(P, root_seed=combos)
                try:
                    m = rt.create_matrix(s, make_layout(kind, 11, 7, block, block, P), prec, fill="random")
                    path = rt.checkpoint(s, tmp_path / f"c{combos}.bin")
                    s2 = rt.restore(path)
                    same = rt.gather(s2, m).tobytes() == rt.gather(s, m).tobytes()
                    rt.shutdown(s2)
                    if not same:
                        bad.append((prec.label, kind.value, P))
                    raw = bytearray(path.read_bytes())
                    raw[len(raw) // 2] ^= 0x01
                    path.write_bytes(bytes(raw))
                    try:
                        rt.restore(path)
                    except rt.IntegrityError:
                        detected += 1
                    combos += 1
                finally:
                    rt.shutdown(s)
    ok = not bad and detected == combos
    verdict(7, "checkpoint round trip", ok, time.perf_counter() - start, 10,
            f"{combos} images bitwise equal={not bad}, flipped byte detected {detected}/{combos}")


# --- 8 -----------------------------------------------------------------------------


def test_criterion_08_pool_steady_state():
    start = time.perf_counter()
    P = 3
    s = rt.init(P)
    try:
        a = rt.create_matrix(s, make_layout("rowblocks", 12, 12, 2, 12, P), fill="random")
        panel = make_layout("colblocks", 12, 12, 12, 4, P)
        b, c = rt.create_matrix(s, panel, fill="random"), rt.create_matrix(s, panel)
        fresh, reused = [], []
        for _ in range(10):
            cyclic_gemm(s, 1.0, a, b, 0.0, c, trans_a=True)
            fresh.append(sum(w.pool.stats.fresh_allocations for w in s.workers))
            reused.append(sum(w.pool.stats.reuses for w in s.workers))
    finally:
        rt.shutdown(s)
    ok = len(set(fresh)) == 1 and all(y > x for x, y in zip(reused, reused[1:]))
    verdict(8, "pool steady state", ok, time.perf_counter() - start, 5,
            f"fresh allocations per iteration {fresh}")


# --- 9 -----------------------------------------------------------------------------


def test_criterion_09_reproducibility(tmp_path):
    start = time.perf_counter()
    runs = []
    for tag in ("a", "b"):
        cfg = RunConfig(workers=4, sizes=(8, 13), blocks=(2, 3), seed=77, deterministic=True,
                        trace=str(tmp_path / f"trace_{tag}.jsonl"))
        reports, code = run_suite(cfg, tmp_path)
        runs.append(([strip_wall_time(r) for r in reports], (tmp_path / f"trace_{tag}.jsonl").read_text(), code))
    same_reports = runs[0][0] == runs[1][0]
    same_traces = runs[0][1] == runs[1][1]
    digests = all(r["result_digest"] for r in runs[0][0])

    # arrival-order sums in threaded mode stay inside the reassociation bound
    within = True
    for trial in range(5):
        s = rt.init(4, deterministic=False)
        try:
            X = (np.random.default_rng(trial).standard_normal((24, 24)) * 10 ** trial).astype(np.float32)
            m = rt.create_matrix(s, make_layout("checkerboard", 24, 24, 5, 5, 4), Precision.SINGLE32,
                                 rt.FILL_HOST, X)
            for axis in (0, 1):
                got = rt.gather(s, add_row_col_sum(s, m, axis, False)).ravel().astype(np.float64)
                err = np.abs(got - X.astype(np.float64).sum(axis=axis))
                within = within and bool(np.all(err <= sum_bound(X, axis, Precision.SINGLE32)))
        finally:
            rt.shutdown(s)
    ok = same_reports and same_traces and digests and runs[0][2] == 0 and within
    verdict(9, "reproducibility", ok, time.perf_counter() - start, 120,
            f"reports equal={same_reports}, traces equal={same_traces}, "
            f"nondeterministic sums within bound={within}")


# --- 10 ----------------------------------------------------------------------------


def test_criterion_10_crossover():
    start = time.perf_counter()
    table = scaling_table([4096, 8192, 16384, 24576], [1, 2, 4, 8], CostModel.from_measurements())
    t = {(e.size, e.workers): e.makespan_us for e in table}
    ok = has_crossover(table, 4096, 24576, 1, 8)
    verdict(10, "size/worker crossover", ok, time.perf_counter() - start, 5,
            f"P=1 vs P=8: {t[(4096, 1)] / 1e3:.1f} vs {t[(4096, 8)] / 1e3:.1f} ms at 4096, "
            f"{t[(24576, 1)] / 1e3:.0f} vs {t[(24576, 8)] / 1e3:.0f} ms at 24576")

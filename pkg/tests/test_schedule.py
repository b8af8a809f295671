import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridgemm import runtime as rt
from gridgemm.core import MatrixDescriptor, Precision, make_layout
from gridgemm.dist_ops import cyclic_gemm
from gridgemm.schedule import (CyclicPlan, Event, GemmGeometry, Schedule, broadcast_schedule,
                               buffer_violations, cyclic_schedule, scaling_table)
from gridgemm.transport import CostModel, Topology

CM = CostModel.from_measurements()


@given(st.integers(1, 6), st.integers(1, 30), st.integers(1, 5))
def test_every_block_visits_every_worker_once(P, rows, br):
    lay = make_layout("rowcyclic", rows, 3, br, 3, P)
    plan = CyclicPlan.from_layout(lay, P)
    visits = {c: [] for c in lay.grid.coords()}
    for o, i in plan.stages():
        for w in range(P):
            c = plan.held(w, o, i)
            if c is not None:
                visits[c].append(w)
    assert all(sorted(v) == list(range(P)) for v in visits.values())


def test_simulator_respects_deps_and_resources():
    s = Schedule()
    s.add(Event("a", "compute", 2.0, ("r",)))
    s.add(Event("b", "compute", 1.0, ("r",)))
    s.add(Event("c", "transfer", 5.0, ("q",), ("a",)))
    s.simulate()
    assert [(e.start, e.end) for e in s.events] == [(0, 2), (2, 3), (2, 7)]
    assert s.makespan == 7


@pytest.mark.parametrize("P", [3, 4, 8])
@pytest.mark.parametrize("inner", [1, 2, 3])
def test_double_buffer_checker(P, inner):
    geo = GemmGeometry.square(96 * P, P, inner)
    topo = Topology.default(P)
    assert buffer_violations(cyclic_schedule(geo, topo, CM)) == []
    if P >= 3:
        assert buffer_violations(cyclic_schedule(geo, topo, CM, double_buffer=False))


@pytest.mark.parametrize("P,B", [(2, 1), (3, 2), (4, 3)])
def test_dry_model_matches_real_trace(P, B):
    n = 6 * P * B
    s = rt.init(P)
    try:
        a = rt.create_matrix(s, make_layout("rowblocks", n, n, 6, n, P), Precision.SINGLE32, "random")
        panel = make_layout("colblocks", n, n, n, -(-n // P), P)
        b = rt.create_matrix(s, panel, Precision.SINGLE32, "random")
        c = rt.create_matrix(s, panel, Precision.SINGLE32)
        mark = s.transport.mark()
        cyclic_gemm(s, 1.0, a, b, 0.0, c)
        real = s.transport.since(mark)
    finally:
        rt.shutdown(s)
    geo = GemmGeometry.square(n, P, B)
    sched = cyclic_schedule(geo, Topology.default(P), CM)
    xfers = [e for e in sched.events if e.kind == "transfer"]
    assert len(xfers) == len(real)
    assert sorted(e.duration for e in xfers) == sorted(r.modeled_time for r in real)


def test_single_worker_makespan_is_pure_compute():
    geo = GemmGeometry.square(512, 1)
    sched = cyclic_schedule(geo, Topology.default(1), CM, flops_rate=1e6)
    assert sched.transfer_count == 0
    assert sched.makespan == pytest.approx(2 * 512 ** 3 / 1e6)


def test_compute_term_shrinks_with_workers():
    t = {e.workers: e for e in scaling_table([24576], [2, 8], CM)}
    assert t[2].compute_us / t[8].compute_us == pytest.approx(4.0)


@pytest.mark.parametrize("P", [2, 4, 8])
def test_broadcast_never_beats_cyclic(P):
    for n in (256, 2048):
        geo = GemmGeometry.square(n, P)
        topo = Topology.single_group(P)
        assert cyclic_schedule(geo, topo, CM).makespan <= broadcast_schedule(geo, topo, CM).makespan


def test_geometry_from_uneven_descriptors():
    a = MatrixDescriptor(0, make_layout("rowblocks", 7, 4, 3, 4, 2), Precision.DOUBLE64)
    c = MatrixDescriptor(1, make_layout("colblocks", 7, 5, 7, 2, 2), Precision.DOUBLE64)
    geo = GemmGeometry.from_descriptors(a, c, 2)
    assert geo.a_elems == {(0, 0): 12, (1, 0): 12, (2, 0): 4}
    assert geo.c_cols == (4, 1)
    assert geo.wire_bytes((2, 0)) == 4 * 8 + 64

import itertools
import math

import pytest
from hypothesis import given, settings, strategies as st

from redy.clustersim import ClusterConfig, ClusterSim
from redy.core import GiB, INFINITE, Slo, VmKind, VmSpec
from redy.errors import CapacityUnavailable, InvalidCache, SloUnsatisfiable
from redy.manager import (AllocationRequest, CacheManager, ManagerRpcClient, ManagerRpcServer, ModelStore,
                          cores_needed, model_record_size, plan_for_type)
from redy.perfmodel.search import satisfies

A = VmSpec("A", 8, 32 * GiB, 1.0)
B = VmSpec("B", 16, 64 * GiB, 1.8)
SPOT = VmSpec("S", 8, 32 * GiB, 0.3, kind=VmKind.SPOT)

LOOSE = Slo.symmetric(8, 1e6)
_STORE = ModelStore()


def manager(menu=(A, B), servers=3, memory_gb=256, mix=None):
    cfg = ClusterConfig(servers, 64, memory_gb * GiB, mix or {1: 1}, list(menu))
    return CacheManager(ClusterSim(cfg), _STORE)


def brute_force_cost(menu, regions, s, region_size):
    """Cheapest single-type VM set by scanning every split of the regions."""
    best = math.inf
    for spec in menu:
        per_vm = spec.memory // region_size
        for k in range(1, regions + 1):
            for cut in itertools.combinations(range(1, regions), k - 1):
                parts = [b - a for a, b in zip((0,) + cut, cut + (regions,))]
                if all(p <= per_vm and spec.cores >= cores_needed(s, p, regions) for p in parts):
                    best = min(best, k * spec.price)
                    break
    return best


def test_model_record_rounding():
    assert [model_record_size(x) for x in (1, 4, 5, 8, 100, 16384, 10 ** 6)] == [4, 4, 8, 8, 128, 16384, 16384]


def test_menu_example_picks_type_a():
    plan_a = plan_for_type(A, 8, 2, GiB)
    plan_b = plan_for_type(B, 8, 2, GiB)
    assert plan_a.cost < plan_b.cost
    m = manager()
    res = m.allocate(AllocationRequest(8 * GiB, Slo(8, 100, 100, 10, 10)))
    assert res.config.s >= 1 and [v.spec.vm_type for v in res.vms] == ["A"]


def test_loose_slo_uses_one_sided_config():
    res = manager().allocate(AllocationRequest(8 * GiB, LOOSE))
    assert res.config.s == 0 and res.config.as_tuple() == (1, 0, 1, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(0, 8),
       st.lists(st.tuples(st.integers(0, 12), st.integers(1, 6), st.integers(1, 30)), min_size=1, max_size=3))
def test_plan_is_cost_minimal(regions, s, rows):
    menu = [VmSpec(f"T{i}", c, m * GiB, p / 10) for i, (c, m, p) in enumerate(rows)]
    plans = [p for p in (plan_for_type(v, regions, s, GiB) for v in menu) if p]
    best = min((p.cost for p in plans), default=math.inf)
    assert best == brute_force_cost(menu, regions, s, GiB)
    for p in plans:
        assert sum(p.region_counts) == regions
        assert sum(cores_needed(s, r, regions) for r in p.region_counts) >= s


def test_manager_choice_matches_exhaustive_scan():
    menu = [A, B, VmSpec("C", 2, 8 * GiB, 0.2), VmSpec("D", 32, 16 * GiB, 0.9)]
    for gb, slo in [(8, Slo(8, 100, 100, 10, 10)), (20, Slo(8, 50, 50, 20, 20)), (3, LOOSE)]:
        m = manager(menu)
        res = m.allocate(AllocationRequest(gb * GiB, slo))
        assert res.cost == pytest.approx(brute_force_cost(menu, gb, res.config.s, GiB))
        assert satisfies(_STORE.get(8, res.distance).point(*res.config.as_tuple()), slo)
        for v in res.vms:
            assert v.spec.cores >= cores_needed(res.config.s, v.region_count, gb)
        assert res.total_regions == gb


def test_distance_tie_break_and_price():
    m = manager(servers=3, mix={1: 1, 3: 1, 5: 1})
    assert m.allocate(AllocationRequest(4 * GiB, LOOSE)).distance == 1


def test_infinite_duration_forbids_spot():
    m = manager((A, SPOT))
    assert m.allocate(AllocationRequest(4 * GiB, LOOSE, INFINITE)).vms[0].spec.kind is VmKind.ON_DEMAND
    assert m.allocate(AllocationRequest(4 * GiB, LOOSE, 3600)).vms[0].spec.kind is VmKind.SPOT


def test_failures_have_no_effect():
    m = manager()
    before = m.cluster.totals()
    with pytest.raises(SloUnsatisfiable):
        m.allocate(AllocationRequest(GiB, Slo.symmetric(8, 0.5)))
    with pytest.raises(CapacityUnavailable):
        m.allocate(AllocationRequest(10_000 * GiB, LOOSE))
    assert m.cluster.totals() == before and not m.caches and not m.cluster.vms


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2000), st.floats(0.1, 1e4), st.floats(0, 500))
def test_random_requests_are_atomic(gb, lat, thr):
    m = manager(servers=2, memory_gb=128)
    before = m.cluster.totals()
    try:
        res = m.allocate(AllocationRequest(gb * GiB, Slo(8, lat, lat, thr, thr)))
    except (SloUnsatisfiable, CapacityUnavailable):
        assert m.cluster.totals() == before
    else:
        assert res.total_regions == gb
        m.deallocate(res.cache_id)
        assert m.cluster.totals() == before


def test_reallocate_grow_shrink_and_deallocate():
    m = manager()
    before = m.cluster.totals()
    res = m.allocate(AllocationRequest(30 * GiB, LOOSE))
    assert [v.region_count for v in res.vms] == [30]
    grown = m.reallocate(res.cache_id, 1)                  # headroom on the last VM
    assert [v.region_count for v in grown.vms] == [31] and len(m.cluster.vms) == 1
    grown = m.reallocate(res.cache_id, 5)
    assert [v.region_count for v in grown.vms] == [32, 4]
    shrunk = m.reallocate(res.cache_id, -4)
    assert [v.region_count for v in shrunk.vms] == [32] and len(m.cluster.vms) == 1
    m.deallocate(res.cache_id)
    assert m.cluster.totals() == before
    with pytest.raises(InvalidCache):
        m.deallocate(res.cache_id)
    with pytest.raises(InvalidCache):
        m.reallocate(res.cache_id, 1)


def test_reclamation_relay():
    m = manager((A, SPOT))
    got = []
    res = m.allocate(AllocationRequest(4 * GiB, LOOSE, 3600), listener=lambda vm, w: got.append((vm, w)))
    vm = res.vms[0].vm_id
    host = m.host(vm)
    m.cluster.reclaim_spot(vm, 30)
    assert got == [(vm, 30)]
    m.cluster.advance(30)
    assert host.mode == "terminated" and vm not in m.hosts
    assert not m.notify_reclamation(vm, 30)                # already gone: no-op


def test_failure_relay_deadline_zero():
    m = manager()
    got = []
    res = m.allocate(AllocationRequest(2 * GiB, LOOSE), listener=lambda vm, w: got.append((vm, w)))
    vm = res.vms[0].vm_id
    m.cluster.fail_vm(vm)
    assert got == [(vm, 0.0)] and m.host(vm).mode == "terminated"


def test_rpc_roundtrip():
    m = manager()
    srv = ManagerRpcServer(m)
    cli = ManagerRpcClient(srv.address)
    try:
        res = cli.allocate(8 * GiB, LOOSE)
        assert res.config.s == 0 and res.total_regions == 8
        assert cli.reallocate(res.cache_id, 2).total_regions == 10
        with pytest.raises(SloUnsatisfiable):
            cli.allocate(GiB, Slo.symmetric(8, 0.5))
        cli.deallocate(res.cache_id)
        with pytest.raises(InvalidCache):
            cli.deallocate(res.cache_id)
        assert cli.notify_reclamation("nope", 30) is False
    finally:
        cli.close()
        srv.stop()

import random

import pytest

from redy.client import RedyClient
from redy.clustersim import ClusterConfig, ClusterSim
from redy.core import GiB, MiB, RegionStatus, Slo, VmKind, VmSpec
from redy.env import SimEnvironment, SocketEnvironment
from redy.errors import AddressOutOfBounds, InvalidCache, SloUnsatisfiable, StaleCache

A = VmSpec("A", 8, 32 * GiB, 1.0)
SMALL = VmSpec("S", 8, 3 * MiB, 0.2)          # three 1 MiB regions per VM
LOOSE = Slo(8, 100, 100, 1, 1)


def sim_client(menu=(A,), servers=2, region_size=MiB, seed=0):
    cfg = ClusterConfig(servers, 64, 256 * GiB, {1: 1}, list(menu))
    env = SimEnvironment(cfg, seed=seed)
    return env, RedyClient(env, region_size=region_size)


def test_fresh_cache_reads_zero_and_read_after_write():
    env, cl = sim_client()
    cid = cl.create(4 * MiB, LOOSE)
    assert cl.read_sync(cid, 100, 16) == bytes(16)
    cl.write_sync(cid, b"hello", 100)
    assert cl.read_sync(cid, 100, 5) == b"hello"
    assert cl.read_sync(cid, 98, 9) == b"\0\0hello\0\0"


def test_cross_region_span():
    env, cl = sim_client()
    cid = cl.create(4 * MiB, LOOSE)
    data = bytes(range(256)) * 16
    cl.write_sync(cid, data, 2 * MiB - 1000)
    assert cl.read_sync(cid, 2 * MiB - 1000, len(data)) == data


def test_callbacks_follow_issue_order():
    env, cl = sim_client(menu=(SMALL,))
    cid = cl.create(6 * MiB, LOOSE)
    assert len(set(cl.handle(cid).table.vms())) >= 2
    rng = random.Random(7)
    order = []
    tickets = []
    for i in range(1000):
        addr = rng.randrange(0, 6 * MiB - 64)
        cb = (lambda t, i=i: order.append(i))
        if rng.random() < 0.5:
            tickets.append(cl.write(cid, i.to_bytes(8, "little"), addr, 8, callback=cb, thread="app"))
        else:
            tickets.append(cl.read(cid, bytearray(8), addr, 8, callback=cb, thread="app"))
    assert cl.wait(*tickets)
    assert order == list(range(1000))
    assert all(t.ok for t in tickets)


def test_last_writer_matches_reference_model():
    env, cl = sim_client(menu=(SMALL,))
    cap = 5 * MiB
    cid = cl.create(cap, LOOSE)
    ref = bytearray(cap)
    rng = random.Random(3)
    reads = []
    for i in range(400):
        addr, n = rng.randrange(0, cap - 3000), rng.randrange(1, 3000)
        if rng.random() < 0.6:
            data = rng.randbytes(n)
            cl.write(cid, data, addr, n, thread="w")
            ref[addr:addr + n] = data
        else:
            buf = bytearray(n)
            reads.append((cl.read(cid, buf, addr, n, thread="w"), buf, bytes(ref[addr:addr + n])))
    assert cl.wait(*(t for t, _, _ in reads))
    for t, buf, want in reads:
        assert bytes(buf) == want


def test_out_of_range_is_reported_in_order():
    env, cl = sim_client()
    cid = cl.create(MiB, LOOSE)
    order = []
    a = cl.write(cid, b"x", 10, 1, callback=lambda t: order.append("a"))
    b = cl.read(cid, bytearray(8), MiB - 4, 8, callback=lambda t: order.append("b"))
    c = cl.read(cid, bytearray(1), 10, 1, callback=lambda t: order.append("c"))
    cl.wait(a, b, c)
    assert order == ["a", "b", "c"]
    assert isinstance(b.error, AddressOutOfBounds) and a.ok and c.ok
    with pytest.raises(AddressOutOfBounds):
        cl.read_sync(cid, MiB, 1)


def test_delete_semantics():
    env, cl = sim_client()
    before = env.cluster.totals()
    cid = cl.create(2 * MiB, LOOSE)
    t = cl.write(cid, b"abc", 0, 3)
    cl.delete(cid)
    assert t.delivered and t.ok
    assert env.cluster.totals() == before
    with pytest.raises(StaleCache):
        cl.read_sync(cid, 0, 1)
    with pytest.raises(InvalidCache):
        cl.delete(cid)
    with pytest.raises(InvalidCache):
        cl.read_sync("nope", 0, 1)


def test_impossible_slo_leaves_nothing_behind():
    env, cl = sim_client()
    before = env.cluster.totals()
    with pytest.raises(SloUnsatisfiable):
        cl.create(MiB, Slo.symmetric(8, 0.5))
    assert env.cluster.totals() == before and not cl.caches


def test_create_with_file_prefix(tmp_path):
    env, cl = sim_client()
    path = tmp_path / "seed.bin"
    blob = random.Random(1).randbytes(MiB + 500)
    path.write_bytes(blob)
    cid = cl.create(3 * MiB, LOOSE, file=path)
    assert cl.read_sync(cid, 0, len(blob)) == blob
    assert cl.read_sync(cid, len(blob), 100) == bytes(100)


def test_reshape_same_slo_shrink_and_grow():
    env, cl = sim_client(menu=(SMALL,))
    cid = cl.create(6 * MiB, LOOSE)
    cl.write_sync(cid, b"keep", 10)
    vms_before = len(env.cluster.vms)
    cl.reshape(cid, 3 * MiB)
    assert len(cl.handle(cid).table) == 3 and len(env.cluster.vms) < vms_before
    with pytest.raises(AddressOutOfBounds):
        cl.read_sync(cid, 3 * MiB, 1)
    cl.reshape(cid, 7 * MiB)
    assert len(cl.handle(cid).table) == 7
    cl.write_sync(cid, b"tail", 7 * MiB - 4)
    assert cl.read_sync(cid, 7 * MiB - 4, 4) == b"tail"
    assert cl.read_sync(cid, 10, 4) == b"keep"
    assert sum(c for _, c in env.manager.record(cl.handle(cid).mgr_id).vms) == 7


def test_reshape_new_slo_preserves_data_and_bad_slo_has_no_effect():
    env, cl = sim_client()
    cid = cl.create(3 * MiB, LOOSE)
    cl.write_sync(cid, b"payload", 2 * MiB + 5)
    old_cfg = cl.handle(cid).config
    with pytest.raises(SloUnsatisfiable):
        cl.reshape(cid, 3 * MiB, Slo.symmetric(8, 0.5))
    assert cl.handle(cid).config == old_cfg
    assert cl.read_sync(cid, 2 * MiB + 5, 7) == b"payload"
    cl.reshape(cid, 3 * MiB, Slo(8, 100, 100, 10, 10))
    assert cl.handle(cid).config != old_cfg
    assert cl.read_sync(cid, 2 * MiB + 5, 7) == b"payload"
    cl.delete(cid)
    assert not env.cluster.vms


# -- migration, reclamation and failure ------------------------------------------------------

from redy.bench import LoadDriver, migrate_demo                       # noqa: E402
from redy.errors import RegionUnavailable                              # noqa: E402
from redy.workload import WorkloadSpec                                 # noqa: E402


def replay_errors(records, rs=16):
    """Count reads that disagree with the same thread's latest acknowledged write."""
    state, bad = {}, 0
    for rec in sorted(records, key=lambda r: (r.thread, r.seq)):
        if rec.is_read:
            bad += (not rec.ok) or rec.got != state.get(rec.key, bytes(rs))
        elif rec.ok:
            state[rec.key] = rec.value
    return state, bad


def test_idle_migration_is_byte_identical():
    env, cl = sim_client()
    cid = cl.create(3 * MiB, LOOSE)
    blob = random.Random(5).randbytes(3 * MiB)
    cl.write_sync(cid, blob, 0)
    job = cl.migrate_regions(cid, [0, 2])
    assert job.error is None and job.report.moved == [0, 2] and not job.report.failed
    h = cl.handle(cid)
    assert h.table.entries[0].vm_id != h.table.entries[1].vm_id
    assert cl.read_sync(cid, 0, len(blob)) == blob
    assert all(e.status is RegionStatus.ACTIVE for e in h.table.entries)


@pytest.mark.parametrize("optimized", [True, False])
def test_migration_under_load_loses_nothing(optimized):
    env, cl = sim_client(seed=2)
    cap = 4 * MiB
    cid = cl.create(cap, LOOSE)
    spec = WorkloadSpec(record_count=cap // 16, read_fraction=0.5, threads=3, seed=11)
    drv = LoadDriver(cl, cid, spec, stop_at=6000.0, own_keys=True, keep_records=True, rate=0.03)
    jobs = []
    env.after(1000.0, lambda: jobs.append(cl.migrate_regions(cid, [1, 3], optimized=optimized, wait=False)))
    drv.run()
    env.run_until(lambda: all(j.done for j in jobs))
    assert jobs and jobs[0].error is None and jobs[0].report.moved == [1, 3]
    state, bad = replay_errors(drv.records)
    assert bad == 0 and all(r.ok for r in drv.records)
    for key, value in state.items():
        assert cl.read_sync(cid, key * 16, 16) == value
    for t, seqs in enumerate(drv.per_thread):
        assert seqs == sorted(seqs)
    stats = cl.handle(cid).stats
    if optimized:
        assert stats["paused_reads"] == 0 and stats["served_by_old_vm"] > 0
    else:
        assert stats["paused_reads"] > 0


def test_migrate_demo_orders_dips():
    opt = migrate_demo(schedule=((1, 2),), optimized=True, region_size=MiB, phase_us=8000.0, rate_mops=0.15)
    base = migrate_demo(schedule=((1, 2),), optimized=False, region_size=MiB, phase_us=8000.0, rate_mops=0.15)
    for r in (opt, base):
        assert r.lost_writes == 0 and r.stale_reads == 0
    assert opt.paused_reads == 0 and base.paused_reads > 0
    assert base.events[0]["write_dip"] > opt.events[0]["write_dip"]
    assert base.events[0]["read_dip"] > opt.events[0]["read_dip"]


def spot_client(vm_gb):
    spot = VmSpec("P", 8, vm_gb * GiB, 0.3, kind=VmKind.SPOT)
    cfg = ClusterConfig(4, 64, 512 * GiB, {1: 1}, [spot])
    env = SimEnvironment(cfg)
    cl = RedyClient(env, region_size=GiB)
    cid = cl.create(vm_gb * GiB, LOOSE, duration=3600)
    return env, cl, cid


def run_reclamation(vm_gb):
    env, cl, cid = spot_client(vm_gb)
    h = cl.handle(cid)
    cl.write_sync(cid, b"first", 0)
    cl.write_sync(cid, b"last", vm_gb * GiB - 4)
    vm = h.table.entries[0].vm_id
    env.sync_cluster()
    deadline = env.cluster.reclaim_spot(vm, 30)
    job = h.jobs[-1]
    env.wait(job)
    return env, cl, cid, job, deadline


def test_reclamation_meets_deadline_for_27_gib():
    env, cl, cid, job, deadline = run_reclamation(27)
    rep = job.report
    assert not rep.failed and not rep.missed_deadline and len(rep.moved) == 27
    assert rep.finished_at / 1e6 < deadline
    assert cl.read_sync(cid, 0, 5) == b"first" and cl.read_sync(cid, 27 * GiB - 4, 4) == b"last"


def test_reclamation_miss_is_surfaced_for_40_gib():
    env, cl, cid, job, deadline = run_reclamation(40)
    rep = job.report
    h = cl.handle(cid)
    assert rep.failed and rep.missed_deadline
    assert any(a[0] == "migration-failed" for a in h.alerts)
    assert cl.read_sync(cid, 0, 5) == b"first"                   # moved before the deadline
    with pytest.raises(RegionUnavailable):
        cl.read_sync(cid, 40 * GiB - 4, 4)


def test_vm_failure_repopulates_from_source(tmp_path):
    env, cl = sim_client(menu=(SMALL,))
    path = tmp_path / "data.bin"
    blob = random.Random(9).randbytes(6 * MiB)
    path.write_bytes(blob)
    cid = cl.create(6 * MiB, LOOSE, file=path)
    h = cl.handle(cid)
    failed = []
    h.on_failure = lambda idx, msg: failed.append(tuple(idx))
    vm = h.table.entries[4].vm_id
    env.cluster.fail_vm(vm)
    env.wait(h.jobs[-1])
    assert failed and set(failed[0]) == {3, 4, 5}
    assert vm not in h.table.vms()
    assert cl.read_sync(cid, 0, len(blob)) == blob


def test_vm_failure_without_source_reports_and_zero_fills():
    env, cl = sim_client(menu=(SMALL,))
    cid = cl.create(6 * MiB, LOOSE)
    cl.write_sync(cid, b"gone", 5 * MiB)
    h = cl.handle(cid)
    env.cluster.fail_vm(h.table.entries[5].vm_id)
    t = cl.read(cid, bytearray(4), 5 * MiB, 4)
    cl.wait(t)
    assert isinstance(t.error, RegionUnavailable)
    env.wait(h.jobs[-1])
    assert cl.read_sync(cid, 5 * MiB, 4) == bytes(4)
    assert ("replaced-empty",) == h.alerts[-1][:1]


def test_target_lost_mid_migration_restarts():
    env, cl = sim_client(menu=(SMALL,), servers=3)
    cid = cl.create(2 * MiB, LOOSE)
    cl.write_sync(cid, b"survive", MiB + 3)
    h = cl.handle(cid)
    first = env.manager.provision(h.mgr_id)
    job = cl.migrate_regions(cid, [1], targets=[first], wait=False)
    env.after(200.0, env.cluster.fail_vm, first)
    env.wait(job)
    assert job.error is None and job.report.moved == [1]
    assert h.table.entries[1].vm_id not in (first, h.table.entries[0].vm_id)
    assert any(a[0] == "target-lost" for a in h.alerts)
    assert cl.read_sync(cid, MiB + 3, 7) == b"survive"


# -- socket backend -----------------------------------------------------------------------------

import threading                                                       # noqa: E402


@pytest.fixture
def sock_client():
    cfg = ClusterConfig(2, 64, 256 * GiB, {1: 1}, [SMALL])
    env = SocketEnvironment(cfg)
    cl = RedyClient(env, region_size=MiB)
    yield env, cl
    for cid in list(cl.caches):
        cl.delete(cid)
    env.close()


def test_socket_roundtrip_and_cross_vm_span(sock_client):
    env, cl = sock_client
    cid = cl.create(6 * MiB, LOOSE)
    assert len(set(cl.handle(cid).table.vms())) == 2
    data = random.Random(4).randbytes(5000)
    cl.write_sync(cid, data, 3 * MiB - 2500)
    assert cl.read_sync(cid, 3 * MiB - 2500, 5000) == data
    assert cl.read_sync(cid, 0, 8) == bytes(8)
    with pytest.raises(AddressOutOfBounds):
        cl.read_sync(cid, 6 * MiB - 1, 2)


def test_socket_ordering_across_threads(sock_client):
    env, cl = sock_client
    cid = cl.create(6 * MiB, LOOSE)
    orders = {}

    def worker(t):
        rng = random.Random(t)
        got = orders[t] = []
        tickets = []
        for i in range(1500):
            addr = rng.randrange(0, 6 * MiB - 8)
            cb = (lambda tk, i=i: got.append(i))
            if rng.random() < 0.5:
                tickets.append(cl.write(cid, bytes(8), addr, 8, callback=cb))
            else:
                tickets.append(cl.read(cid, bytearray(8), addr, 8, callback=cb))
        assert cl.wait(*tickets, timeout_us=60e6)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert all(orders[t] == list(range(1500)) for t in range(4))


def test_socket_migration_keeps_data(sock_client):
    env, cl = sock_client
    cid = cl.create(2 * MiB, LOOSE)
    cl.write_sync(cid, b"moved", MiB + 10)
    job = cl.migrate_regions(cid, [1])
    assert job.error is None and job.report.moved == [1]
    assert cl.read_sync(cid, MiB + 10, 5) == b"moved"

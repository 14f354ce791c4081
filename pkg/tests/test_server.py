import random

import pytest

from redy.core import GiB, MiB, RdmaConfig
from redy.errors import AllocationFailed, ConnectionFailed, InvalidOperation, MigrationAborted
from redy.server import CacheServer, ServerMode, copy_region
from redy.transport.netmodel import NetworkModel
from redy.transport.sock import SocketMigrationSource, SocketQueuePair, SocketServerEndpoint
from redy.transport.wire import Op, Request, RequestBatch, Status


def test_allocation_accounting():
    srv = CacheServer("a", 4 * GiB)
    grants = srv.allocate_regions(3)
    assert len(grants) == 3 and srv.free_regions == 1
    with pytest.raises(AllocationFailed):
        srv.allocate_regions(2)
    assert srv.free_regions == 1
    srv.release_regions([grants[0][0]])
    assert srv.free_regions == 2


def test_fresh_region_is_zero():
    srv = CacheServer("a", 2 * GiB)
    cid, grants = srv.handle_connect(1, RdmaConfig(1, 1, 2, 1))
    rid = grants[0][0]
    out = srv.execute_batch(RequestBatch(1, [Request(Op.READ, rid, 12345, 16)]), cid)
    assert out.responses[0].payload == bytes(16)


def test_batch_semantics():
    srv = CacheServer("a", 2 * GiB)
    cid, grants = srv.handle_connect(1, RdmaConfig(1, 1, 4, 1))
    rid = grants[0][0]
    out = srv.execute_batch(RequestBatch(1, [Request(Op.WRITE, rid, 0, 4, b"abcd"), Request(Op.READ, rid, 0, 4),
                                             Request(Op.READ, rid, GiB - 1, 2), Request(Op.READ, 99, 0, 1)]), cid)
    assert [r.status for r in out.responses] == [Status.OK, Status.OK, Status.OUT_OF_BOUNDS, Status.ACCESS_DENIED]
    assert out.responses[1].payload == b"abcd"
    with pytest.raises(InvalidOperation):
        srv.execute_batch(RequestBatch(1, [Request(Op.READ, rid, 0, 1)]), cid)   # replayed id


def test_no_server_threads_means_one_sided_only():
    srv = CacheServer("a", 2 * GiB)
    cid, grants = srv.handle_connect(1, RdmaConfig(1, 0, 1, 1))
    rid = grants[0][0]
    with pytest.raises(InvalidOperation):
        srv.execute_batch(RequestBatch(1, [Request(Op.READ, rid, 0, 1)] * 2), cid)
    r = srv.execute_one_sided(Request(Op.WRITE, rid, 0, 2, b"hi"), grants[0][1])
    assert r.ok and srv.cpu_requests == 0


def test_random_batches_match_reference():
    rng = random.Random(5)
    srv = CacheServer("a", 2 * 4096, region_size=4096)
    cid, grants = srv.handle_connect(2, RdmaConfig(2, 2, 8, 4))
    ref = {rid: bytearray(4096) for rid, _ in grants}
    for bid in range(1, 200):
        reqs = []
        for _ in range(rng.randint(1, 8)):
            rid = rng.choice(list(ref))
            off = rng.randrange(0, 4090)
            n = rng.randint(1, 6)
            if rng.random() < 0.6:
                reqs.append(Request(Op.WRITE, rid, off, n, rng.randbytes(n)))
            else:
                reqs.append(Request(Op.READ, rid, off, n))
        out = srv.execute_batch(RequestBatch(bid, reqs), cid)
        for req, resp in zip(reqs, out.responses):
            if req.op is Op.WRITE:
                ref[req.region_id][req.offset:req.offset + req.length] = req.payload
            else:
                assert resp.payload == bytes(ref[req.region_id][req.offset:req.offset + req.length])
    for rid in ref:
        assert srv.regions[rid].read(0, 4096) == bytes(ref[rid])


def test_migration_copy_checksum():
    src = CacheServer("old", 2 * GiB)
    dst = CacheServer("new", 2 * GiB)
    (rid, tok), = src.allocate_regions(1)
    rng = random.Random(1)
    for _ in range(200):
        src.regions[rid].write(rng.randrange(0, GiB - 64), rng.randbytes(64))
    (drid, _), = dst.allocate_regions(1)
    src.start_draining()
    assert src.mode is ServerMode.DRAINING
    with pytest.raises(AllocationFailed):
        src.allocate_regions(1)
    copy_region(src, tok, dst, drid, chunk=MiB)
    assert dst.regions[drid].checksum() == src.regions[rid].checksum()


def test_migration_of_empty_region():
    src, dst = CacheServer("old", GiB), CacheServer("new", GiB)
    (rid, tok), = src.allocate_regions(1)
    (drid, _), = dst.allocate_regions(1)
    assert copy_region(src, tok, dst, drid) == 0
    assert dst.regions[drid].populated() == []


def test_migration_aborts_when_source_terminates():
    src, dst = CacheServer("old", GiB), CacheServer("new", GiB)
    (rid, tok), = src.allocate_regions(1)
    src.regions[rid].write(0, b"x")
    src.regions[rid].write(GiB // 2, b"y")
    (drid, _), = dst.allocate_regions(1)
    stream = src.serve_migration_reads(tok, chunk=MiB)
    off, data = next(stream)
    dst.ingest(drid, off, data)
    src.terminate()
    with pytest.raises(MigrationAborted):
        next(stream)


def test_migration_time_calibration():
    assert NetworkModel().migration_time(GiB) / 1e6 == pytest.approx(1.09, rel=1e-9)


# -- socket backend --------------------------------------------------------------------

@pytest.fixture
def endpoint():
    srv = CacheServer("sock", 4 * MiB, region_size=MiB, server_threads=2)
    ep = SocketServerEndpoint(srv)
    yield srv, ep
    ep.stop()


def _wait(qp, n, timeout=5.0):
    import time
    out, deadline = [], time.time() + timeout
    while len(out) < n and time.time() < deadline:
        out.extend(qp.poll())
        time.sleep(0.001)
    return out


def test_socket_roundtrip(endpoint):
    srv, ep = endpoint
    qp, grants = SocketQueuePair.connect(ep.address, RdmaConfig(2, 1, 4, 4), 2)
    assert len(grants) == 2
    rid = grants[0][0]
    assert qp.post_batch(RequestBatch(0, [Request(Op.WRITE, rid, 0, 3, b"abc"), Request(Op.READ, rid, 0, 3)]))
    qp.one_sided_transfer(Op.READ, grants[0][1], rid, 0, 3)
    out = _wait(qp, 2)
    assert [b.batch_id for b in out] == [1, 2]
    assert out[0].responses[1].payload == b"abc" and out[1].responses[0].payload == b"abc"
    # second connection attaches to existing regions
    qp2, g2 = SocketQueuePair.connect(ep.address, RdmaConfig(2, 1, 4, 4), 0, attach=[rid])
    qp2.post_batch(RequestBatch(0, [Request(Op.READ, rid, 0, 3)]))
    assert _wait(qp2, 1)[0].responses[0].payload == b"abc"
    qp.close()
    qp2.close()


def test_socket_backpressure_and_failures(endpoint):
    srv, ep = endpoint
    with pytest.raises(AllocationFailed):
        SocketQueuePair.connect(ep.address, RdmaConfig(1, 1, 1, 1), 10)
    qp, grants = SocketQueuePair.connect(ep.address, RdmaConfig(1, 1, 2, 2), 1)
    rid = grants[0][0]
    batches = [RequestBatch(0, [Request(Op.READ, rid, 0, 8)] * 2) for _ in range(3)]
    accepted = [qp.post_batch(b) for b in batches]
    assert accepted[:2] == [True, True]
    assert qp.in_flight <= 2
    _wait(qp, sum(accepted))
    ep.stop()
    srv.terminate()
    import time
    deadline = time.time() + 5
    while not qp.failed and time.time() < deadline:
        time.sleep(0.01)
    assert qp.failed


def test_socket_unreachable():
    with pytest.raises(ConnectionFailed):
        SocketQueuePair.connect(("127.0.0.1", 1), RdmaConfig(1, 1, 1, 1), 1, timeout=0.5)


def test_socket_migration_reads(endpoint):
    srv, ep = endpoint
    (rid, tok), = srv.allocate_regions(1)
    srv.regions[rid].write(100, b"payload")
    src = SocketMigrationSource(ep.address, tok)
    assert src.read(100, 7) == b"payload"
    src.close()

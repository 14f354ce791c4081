"""Cache client: the Create / Read / Write / Reshape / Delete API.

Every application thread owns an SPSC ring feeding exactly one client thread.
A client thread drains its rings, cuts each operation into per-region
requests, batches them per VM connection (at most ``b`` requests, at most
``q`` batches in flight) and polls completions.  Completions are handed back
through a per-application-thread reorder buffer, so callbacks always fire in
issue order even when requests to different VMs finish out of order.

While a region migrates, reads keep going to the old VM and writes are
parked; a read that overlaps a parked write is patched with the parked bytes
so a thread always observes its own earlier writes.
"""
from __future__ import annotations

import itertools
import logging
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable

from .core import DEFAULT_REGION_SIZE, INFINITE, RegionStatus, RegionTable, Slo, regions_needed
from .errors import (AccessDenied, AddressOutOfBounds, ConnectionLost, InvalidCache, RedyError, RegionUnavailable,
                     StaleCache)
from .manager import AllocationRequest, AllocationResult
from .transport.ring import RingBuffer
from .transport.wire import Op, Request, RequestBatch, Status

log = logging.getLogger(__name__)

DEFAULT_PARK_LIMIT = 1 << 20
RING_CAPACITY = 4096


def status_error(status: Status) -> RedyError:
    if status is Status.OUT_OF_BOUNDS:
        return AddressOutOfBounds("server rejected an out-of-bounds access")
    if status is Status.ACCESS_DENIED:
        return AccessDenied("server denied access to the region")
    return ConnectionLost("request failed with its connection")


@dataclass(eq=False)
class Ticket:
    """One asynchronous Read or Write."""

    thread: object
    seq: int
    op: Op
    addr: int
    size: int
    buf: object
    callback: Callable | None
    issued_at: float
    parts: int = 0
    parked: int = 0
    error: RedyError | None = None
    completed_at: float | None = None
    delivered: bool = False

    @property
    def ok(self) -> bool:
        return self.delivered and self.error is None

    @property
    def latency(self) -> float | None:
        return None if self.completed_at is None else self.completed_at - self.issued_at


@dataclass(eq=False)
class Sub:
    """The part of a ticket that falls inside one region."""

    ticket: Ticket
    index: int
    roff: int
    length: int
    boff: int
    vm: str | None = None
    rid: int = -1
    patches: list = field(default_factory=list)
    counted_write: bool = False


class AppThread:
    def __init__(self, key, ct: "ClientThread"):
        self.key = key
        self.ct = ct
        self.ring: RingBuffer[Ticket] = RingBuffer(RING_CAPACITY)
        self.seqs = itertools.count()
        self.next_deliver = 0
        self.finished: dict[int, Ticket] = {}
        self.active = 0              # issued, not yet completed
        self.parked = 0              # active tickets waiting on a migration
        self.on_progress: Callable[[], None] | None = None
        self.delivered = 0

    @property
    def window_used(self) -> int:
        return self.active - self.parked

    def progress(self):
        if self.on_progress is not None:
            self.on_progress()


class Command:
    """Control-plane work executed inside a client thread."""

    def __init__(self, fn: Callable[["ClientThread"], None]):
        self.fn = fn
        self.done = False


class ClientThread:
    def __init__(self, handle: "CacheHandle", index: int):
        self.handle = handle
        self.index = index
        self.key = (f"client-{handle.cache_id}", index)
        self.apps: list[AppThread] = []
        self.conns: dict[str, object] = {}
        self.retiring: dict[str, list] = defaultdict(list)
        self.staging: dict[str, deque] = defaultdict(deque)
        self.inflight: dict[int, deque] = defaultdict(deque)
        self.inbox: deque[Command] = deque()
        self.env = handle.env
        self.kick = self.env.kicker(self)

    # -- connections ------------------------------------------------------------------
    def connect(self, vm_id: str, rids: list[int]) -> None:
        h = self.handle
        qp, _ = self.env.connect(self.key, vm_id, h.config, h.distance, sorted(rids))
        qp.on_completion = lambda _qp: self.kick()
        self.conns[vm_id] = qp

    def ensure(self, vm_id: str, rids: list[int]) -> None:
        qp = self.conns.get(vm_id)
        if qp is None or qp.failed:
            self.connect(vm_id, rids)
            return
        missing = [r for r in rids if r not in qp.tokens]
        if not missing:
            return
        h = self.handle
        new = self.env.extend(qp, vm_id, h.config, h.distance, self.key, missing)
        if new is not qp:
            new.on_completion = lambda _qp: self.kick()
            self.retiring[vm_id].append(qp)
            self.conns[vm_id] = new

    def disconnect(self, vm_id: str) -> None:
        qp = self.conns.pop(vm_id, None)
        if qp is not None and not qp.closed:
            qp.close()

    def close(self) -> None:
        for vm in list(self.conns):
            self.disconnect(vm)
        for qps in self.retiring.values():
            for qp in qps:
                qp.close()
        self.retiring.clear()

    # -- main loop ------------------------------------------------------------------------
    def pump(self) -> bool:
        progress = False
        while self.inbox:
            cmd = self.inbox.popleft()
            cmd.fn(self)
            cmd.done = True
            progress = True
        for app in self.apps:
            for t in app.ring.drain():
                self._split(app, t)
                progress = True
        while True:
            for vm in list(self.staging):
                if self.staging[vm]:
                    self._post(vm)
            if not self._poll():
                return progress
            progress = True

    def _split(self, app: AppThread, t: Ticket) -> None:
        h = self.handle
        if t.error is not None:
            self._finish(t)
            return
        extents = h.table.split(t.addr, t.size)
        t.parts = len(extents)
        boff = 0
        for idx, roff, n in extents:
            self.route(Sub(t, idx, roff, n, boff))
            boff += n

    def route(self, sub: Sub) -> None:
        h = self.handle
        t = sub.ticket
        with h.lock:
            e = h.table.entries[sub.index]
            st = e.status
            if st is RegionStatus.ACTIVE or (st is RegionStatus.MIGRATING and t.op is Op.READ):
                sub.vm, sub.rid = e.vm_id, e.physical_region_id
                if st is RegionStatus.MIGRATING:
                    sub.patches = h.patches_for(sub)
                    h.stats["served_by_old_vm"] += 1
                h.outstanding[sub.vm] += 1
                h.region_out[(sub.vm, sub.rid)] += 1
                if t.op is Op.WRITE:
                    h.writes_out[sub.index] += 1
                    sub.counted_write = True
                self.staging[sub.vm].append(sub)
                return
            if st in (RegionStatus.MIGRATING, RegionStatus.PAUSED):
                h.parked[sub.index].append(sub)
                h.parked_total += 1
                h.stats["paused_reads" if t.op is Op.READ else "parked_writes"] += 1
                t.parked += 1
                if t.parked == 1:
                    app = h.apps[t.thread]
                    app.parked += 1
                    app.progress()
                return
        self._sub_done(sub, RegionUnavailable(f"region {sub.index} is unavailable"))

    def _post(self, vm: str) -> None:
        q = self.staging[vm]
        if any(r.in_flight for r in self.retiring.get(vm, ())):
            return                                    # old connection must drain first
        qp = self.conns.get(vm)
        if qp is None or qp.failed or qp.closed:
            while q:
                self._sub_done(q.popleft(), ConnectionLost(f"no connection to {vm}"))
            return
        b = self.handle.config.b
        while q:
            subs = [q.popleft() for _ in range(min(b, len(q)))]
            reqs = []
            for s in subs:
                t = s.ticket
                if t.op is Op.WRITE:
                    reqs.append(Request(Op.WRITE, s.rid, s.roff, s.length, bytes(t.buf[s.boff:s.boff + s.length])))
                else:
                    reqs.append(Request(Op.READ, s.rid, s.roff, s.length))
            batch = RequestBatch(0, reqs)
            if len(reqs) == 1:
                batch.one_sided = True
                batch.token = qp.tokens.get(reqs[0].region_id, 0)
            try:
                ok = qp.post_batch(batch)
            except ConnectionLost as exc:
                for s in subs:
                    self._sub_done(s, exc)
                continue
            if not ok:
                q.extendleft(reversed(subs))
                return
            self.inflight[id(qp)].append((batch, subs))

    def _poll(self) -> bool:
        progress = False
        qps = list(self.conns.values()) + [qp for lst in self.retiring.values() for qp in lst]
        for qp in qps:
            for resp in qp.poll():
                progress = True
                _, subs = self.inflight[id(qp)].popleft()
                for s, r in zip(subs, resp.responses):
                    if r.status is Status.OK:
                        if s.ticket.op is Op.READ:
                            buf = s.ticket.buf
                            buf[s.boff:s.boff + s.length] = r.payload
                            for start, data in s.patches:
                                buf[s.boff + start:s.boff + start + len(data)] = data
                        self._sub_done(s, None)
                    else:
                        self._sub_done(s, status_error(r.status))
        for vm, lst in list(self.retiring.items()):
            for qp in [x for x in lst if not x.in_flight]:
                lst.remove(qp)
                qp.close()
            if not lst:
                del self.retiring[vm]
        return progress

    def _sub_done(self, sub: Sub, error: RedyError | None) -> None:
        h = self.handle
        if sub.vm is not None:
            with h.lock:
                h.outstanding[sub.vm] -= 1
                h.region_out[(sub.vm, sub.rid)] -= 1
                if sub.counted_write:
                    h.writes_out[sub.index] -= 1
        t = sub.ticket
        if error is not None and t.error is None:
            t.error = error
        t.parts -= 1
        if t.parts == 0:
            self._finish(t)

    def _finish(self, t: Ticket) -> None:
        h = self.handle
        t.completed_at = self.env.now()
        h.completions.append((t.completed_at, t.op, t.error is None))
        app = h.apps[t.thread]
        app.active -= 1
        app.finished[t.seq] = t
        while app.next_deliver in app.finished:
            done = app.finished.pop(app.next_deliver)
            app.next_deliver += 1
            done.delivered = True
            app.delivered += 1
            if done.callback is not None:
                try:
                    done.callback(done)
                except Exception:        # a failing callback must not stall the pipeline
                    log.exception("callback raised")
        app.progress()

    def requeue(self, subs: list[Sub]) -> None:
        for s in subs:
            t = s.ticket
            t.parked -= 1
            if t.parked == 0:
                self.handle.apps[t.thread].parked -= 1
            self.route(s)


class CacheHandle:
    """Client-side state of one cache."""

    def __init__(self, client: "RedyClient", cache_id: str, result: AllocationResult, capacity: int, slo: Slo,
                 duration: float):
        self.client = client
        self.env = client.env
        self.cache_id = cache_id
        self.mgr_id = result.cache_id
        self.capacity = capacity
        self.slo = slo
        self.duration = duration
        self.config = result.config
        self.distance = result.distance
        self.region_size = result.region_size
        self.lock = threading.RLock()
        self.table: RegionTable | None = None
        self.cts: list[ClientThread] = []
        self.apps: dict[object, AppThread] = {}
        self.outstanding: dict[str, int] = defaultdict(int)             # subs in flight per VM
        self.region_out: dict[tuple, int] = defaultdict(int)           # ... per (VM, physical region)
        self.writes_out: dict[int, int] = defaultdict(int)
        self.parked: dict[int, list[Sub]] = defaultdict(list)
        self.parked_total = 0
        self.park_limit = client.park_limit
        self.completions: list[tuple[float, Op, bool]] = []
        self.stats: dict[str, int] = defaultdict(int)
        self.source: str | None = None
        self.deleted = False
        self.jobs: list = []
        self.alerts: list[tuple] = []
        self.on_failure: Callable[[list[int], str], None] | None = None
        self._rr = itertools.count()

    # -- setup ------------------------------------------------------------------------------
    def open(self, result: AllocationResult) -> None:
        placements = []
        per_vm: dict[str, list[int]] = {}
        for v in result.vms:
            host = self.env.host(v.vm_id)
            grants = host.allocate_regions(v.region_count)
            per_vm[v.vm_id] = [r for r, _ in grants]
            placements.extend((v.vm_id, r) for r, _ in grants)
        n = regions_needed(self.capacity, self.region_size)
        self.table = RegionTable.build(self.capacity, placements[:n], self.region_size)
        self.start_threads(per_vm)

    def start_threads(self, per_vm: dict[str, list[int]]) -> None:
        self.cts = [ClientThread(self, i) for i in range(self.config.c)]
        for ct in self.cts:
            for vm, rids in per_vm.items():
                ct.connect(vm, rids)
        for ct in self.cts:
            self.env.start_thread(ct)
        apps = list(self.apps.values())
        for i, app in enumerate(apps):
            app.ct = self.cts[i % len(self.cts)]
            app.ct.apps.append(app)

    def stop_threads(self) -> None:
        for ct in self.cts:
            self.env.stop_thread(ct)
            ct.close()
        self.cts = []

    def regions_by_vm(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = defaultdict(list)
        for e in self.table.entries:
            out[e.vm_id].append(e.physical_region_id)
        return dict(out)

    def app(self, key) -> AppThread:
        a = self.apps.get(key)
        if a is None:
            ct = self.cts[next(self._rr) % len(self.cts)]
            a = AppThread(key, ct)
            self.apps[key] = a
            ct.apps.append(a)
        return a

    # -- data-plane helpers used by client threads ------------------------------------------
    def patches_for(self, sub: Sub) -> list[tuple[int, bytes]]:
        out = []
        lo, hi = sub.roff, sub.roff + sub.length
        for w in self.parked[sub.index]:
            if w.ticket.op is not Op.WRITE:
                continue
            a, b = max(lo, w.roff), min(hi, w.roff + w.length)
            if a < b:
                src = w.ticket.buf
                start = w.boff + (a - w.roff)
                out.append((a - lo, bytes(src[start:start + (b - a)])))
        return out

    def idle(self) -> bool:
        return all(a.active == 0 for a in self.apps.values())

    @property
    def parking_full(self) -> bool:
        return self.parked_total >= self.park_limit

    # -- control-plane helpers (called from coroutines) --------------------------------------
    def run_on_threads(self, fn: Callable[[ClientThread], None]) -> list[Command]:
        cmds = []
        for ct in self.cts:
            cmd = Command(fn)
            ct.inbox.append(cmd)
            ct.kick()
            cmds.append(cmd)
        return cmds

    def set_status(self, index: int, status: RegionStatus) -> None:
        with self.lock:
            self.table = self.table.with_status(index, status)

    def remap(self, index: int, vm_id: str, rid: int) -> None:
        """Point ``index`` at its new home and hand parked requests back to their threads."""
        with self.lock:
            self.table = self.table.remap(index, vm_id, rid)
            parked = self.parked.pop(index, [])
            self.parked_total -= len(parked)
        self._release_parked(parked)

    def _release_parked(self, parked: list[Sub]) -> None:
        by_ct: dict[int, list[Sub]] = defaultdict(list)
        for s in parked:
            by_ct[self.apps[s.ticket.thread].ct.index].append(s)
        for ct in self.cts:
            subs = by_ct.get(ct.index)
            if subs:
                ct.inbox.append(Command(lambda c, subs=subs: c.requeue(subs)))
                ct.kick()

    def fail_region(self, index: int, reason: str) -> None:
        with self.lock:
            self.table = self.table.with_status(index, RegionStatus.FAILED)
            parked = self.parked.pop(index, [])
            self.parked_total -= len(parked)
        self._release_parked(parked)      # re-routed against a failed entry: they fail
        self.alerts.append(("region-failed", index, reason))


@dataclass
class MigrationReport:
    indices: list[int]
    started_at: float
    finished_at: float | None = None
    moved: list[int] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)
    deadline: float | None = None

    @property
    def missed_deadline(self) -> bool:
        return bool(self.failed) or (self.deadline is not None and self.finished_at is not None
                                     and self.finished_at > self.deadline)


class RedyClient:
    """Library entry point; one instance per application process."""

    def __init__(self, env, region_size: int = DEFAULT_REGION_SIZE, park_limit: int = DEFAULT_PARK_LIMIT):
        self.env = env
        self.manager = env.manager
        self.region_size = region_size
        self.park_limit = park_limit
        self.caches: dict[str, CacheHandle] = {}
        self.deleted: set[str] = set()
        self._ids = itertools.count(1)

    def handle(self, cache_id: str) -> CacheHandle:
        h = self.caches.get(cache_id)
        if h is None:
            if cache_id in self.deleted:
                raise StaleCache(f"cache {cache_id} was deleted")
            raise InvalidCache(f"unknown cache {cache_id}")
        return h

    # -- Create ------------------------------------------------------------------------------
    def create(self, capacity: int, slo: Slo, duration: float = INFINITE, file=None) -> str:
        if capacity < 1:
            raise ValueError("capacity must be >= 1 byte")
        cache_id = f"c{next(self._ids)}"
        req = AllocationRequest(capacity, slo, duration, self.region_size)
        result = self.manager.allocate(req, listener=lambda vm, w, cid=cache_id: self._alert(cid, vm, w))
        h = CacheHandle(self, cache_id, result, capacity, slo, duration)
        try:
            h.open(result)
        except RedyError:
            self.manager.deallocate(result.cache_id)
            raise
        self.caches[cache_id] = h
        if file is not None:
            h.source = str(file)
            self._populate(h, range(len(h.table)))
        return cache_id

    def _populate(self, h: CacheHandle, indices) -> None:
        """Fill regions from the cache's source file (control-plane copy into the VM agents)."""
        with open(h.source, "rb") as fh:
            for idx in indices:
                e = h.table.entries[idx]
                start = idx * h.region_size
                n = min(h.region_size, h.capacity - start)
                fh.seek(start)
                data = fh.read(n)
                if data:
                    self.env.host(e.vm_id).ingest(e.physical_region_id, 0, data)

    # -- Read / Write -------------------------------------------------------------------------
    def _issue(self, cache_id, op: Op, buf, addr: int, size: int, callback, thread) -> Ticket:
        h = self.handle(cache_id)
        if thread is None:
            thread = threading.get_ident()
        app = h.app(thread)
        t = Ticket(thread, next(app.seqs), op, addr, size, buf, callback, self.env.now())
        if size < 1 or addr < 0 or addr + size > h.capacity:
            t.error = AddressOutOfBounds(f"[{addr}, {addr + size}) outside capacity {h.capacity}")
        elif len(buf) < size:
            raise ValueError("buffer shorter than size")
        if not self.env.is_sim:
            while h.parking_full:
                threading.Event().wait(0.0005)
        app.active += 1
        while not app.ring.try_push(t):
            if self.env.is_sim:
                app.ct.pump()
            else:
                app.ct.kick()
                threading.Event().wait(0.0001)
        app.ct.kick()
        return t

    def read(self, cache_id: str, dst, addr: int, size: int, callback=None, thread=None) -> Ticket:
        return self._issue(cache_id, Op.READ, dst, addr, size, callback, thread)

    def write(self, cache_id: str, src, addr: int, size: int, callback=None, thread=None) -> Ticket:
        return self._issue(cache_id, Op.WRITE, memoryview(bytes(src)), addr, size, callback, thread)

    def wait(self, *tickets: Ticket, timeout_us: float | None = None) -> bool:
        pos = 0

        def done() -> bool:
            nonlocal pos
            while pos < len(tickets) and tickets[pos].delivered:
                pos += 1
            return pos == len(tickets)
        return self.env.run_until(done, timeout_us)

    def read_sync(self, cache_id: str, addr: int, size: int, thread=None) -> bytes:
        buf = bytearray(size)
        t = self.read(cache_id, buf, addr, size, thread=thread)
        self.wait(t)
        if t.error is not None:
            raise t.error
        return bytes(buf)

    def write_sync(self, cache_id: str, data: bytes, addr: int, thread=None) -> None:
        t = self.write(cache_id, data, addr, len(data), thread=thread)
        self.wait(t)
        if t.error is not None:
            raise t.error

    # -- Delete -------------------------------------------------------------------------------
    def delete(self, cache_id: str) -> None:
        h = self.handle(cache_id) if cache_id not in self.deleted else None
        if h is None:
            raise InvalidCache(f"cache {cache_id} already deleted")
        del self.caches[cache_id]
        self.deleted.add(cache_id)
        h.deleted = True
        self.env.run_until(h.idle, None if self.env.is_sim else 30e6)
        h.stop_threads()
        self.manager.deallocate(h.mgr_id)

    # -- Reshape ------------------------------------------------------------------------------
    def reshape(self, cache_id: str, capacity: int, slo: Slo | None = None) -> None:
        from .migration import copy_cache
        h = self.handle(cache_id)
        if capacity < 1:
            raise ValueError("capacity must be >= 1 byte")
        self.env.run_until(h.idle, None if self.env.is_sim else 30e6)
        slo = slo or h.slo
        if slo == h.slo:
            self._resize(h, capacity)
            return
        req = AllocationRequest(capacity, slo, h.duration, self.region_size)
        result = self.manager.allocate(req, listener=lambda vm, w, cid=cache_id: self._alert(cid, vm, w))
        new = CacheHandle(self, cache_id, result, capacity, slo, h.duration)
        try:
            new.open(result)
            job = self.env.wait(self.env.drive(copy_cache(h, new), f"reshape-{cache_id}"))
            if job.error is not None:
                raise job.error
        except RedyError:
            new.stop_threads()
            self.manager.deallocate(result.cache_id)
            raise
        old_apps = h.apps
        h.stop_threads()
        self.manager.deallocate(h.mgr_id)
        for key in old_apps:
            new.app(key)
        new.source = h.source
        self.caches[cache_id] = new

    def _resize(self, h: CacheHandle, capacity: int) -> None:
        old_n, new_n = len(h.table), regions_needed(capacity, h.region_size)
        if new_n > old_n:
            before = {vm: len(r) for vm, r in h.regions_by_vm().items()}
            result = self.manager.reallocate(h.mgr_id, new_n - old_n)
            entries = list(h.table.entries)
            added: dict[str, list[int]] = {}
            for v in result.vms:
                extra = v.region_count - before.get(v.vm_id, 0)
                if extra > 0:
                    rids = [r for r, _ in self.env.host(v.vm_id).allocate_regions(extra)]
                    added[v.vm_id] = rids
                    entries.extend((v.vm_id, r) for r in rids)
            placements = [(e.vm_id, e.physical_region_id) for e in entries[:old_n]] + \
                         [e for e in entries[old_n:]]
            with h.lock:
                h.table = RegionTable.build(capacity, placements, h.region_size)
                h.capacity = capacity
            current = h.regions_by_vm()
            cmds = h.run_on_threads(lambda ct: [ct.ensure(vm, current[vm]) for vm in added])
            self.env.run_until(lambda: all(c.done for c in cmds))
        elif new_n < old_n:
            dropped = h.table.entries[new_n:]
            with h.lock:
                h.table = RegionTable.build(capacity, [(e.vm_id, e.physical_region_id)
                                                       for e in h.table.entries[:new_n]], h.region_size)
                h.capacity = capacity
            remaining = set(h.regions_by_vm())
            for e in dropped:
                host = self.env.host(e.vm_id)
                if host is not None:
                    host.release_regions([e.physical_region_id])
            gone = {e.vm_id for e in dropped} - remaining
            cmds = h.run_on_threads(lambda ct: [ct.disconnect(vm) for vm in gone])
            self.env.run_until(lambda: all(c.done for c in cmds))
            self.manager.reallocate(h.mgr_id, new_n - old_n, release_from=[e.vm_id for e in dropped])
        else:
            with h.lock:
                h.table = RegionTable.build(capacity, [(e.vm_id, e.physical_region_id)
                                                       for e in h.table.entries], h.region_size)
                h.capacity = capacity

    # -- migration and reclamation ---------------------------------------------------------------
    def migrate_regions(self, cache_id: str, indices: list[int], targets: list[str] | None = None,
                        optimized: bool = True, wait: bool = True):
        """Move regions to ``targets`` (default: one freshly provisioned VM)."""
        from .migration import migrate
        h = self.handle(cache_id)
        if targets is None:
            dst = self.manager.provision(h.mgr_id)
            targets = [dst] * len(indices)
        report = MigrationReport(list(indices), self.env.now())
        job = self.env.drive(migrate(h, list(indices), list(targets), optimized, report), f"migrate-{cache_id}")
        job.report = report
        h.jobs.append(job)
        if wait:
            self.env.wait(job)
        return job

    def _alert(self, cache_id: str, vm_id: str, warning_s: float) -> None:
        h = self.caches.get(cache_id)
        if h is not None:
            self.handle_reclamation_warning(cache_id, vm_id, warning_s)

    def handle_reclamation_warning(self, cache_id: str, vm_id: str, warning_s: float):
        from .migration import migrate, recover
        h = self.handle(cache_id)
        indices = h.table.entries_on(vm_id)
        if not indices:
            return None
        h.alerts.append(("reclamation", vm_id, warning_s))
        if warning_s <= 0:
            for idx in indices:
                h.fail_region(idx, f"{vm_id} failed")
            job = self.env.drive(recover(h, vm_id, indices), f"recover-{vm_id}")
            h.jobs.append(job)
            return job
        dst = self.manager.provision(h.mgr_id)
        now = self.env.now()
        report = MigrationReport(indices, now, deadline=now + warning_s * 1e6)
        job = self.env.drive(migrate(h, indices, [dst] * len(indices), True, report), f"reclaim-{vm_id}")
        job.report = report
        h.jobs.append(job)
        return job

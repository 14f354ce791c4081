"""Benchmark drivers: closed-loop cache load, per-interval CSV rows and the migration demo."""
from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field

import numpy as np

from .client import RedyClient
from .clustersim import ClusterConfig
from .core import GiB, MiB, Slo, VmSpec
from .env import SimEnvironment, SocketEnvironment
from .transport.wire import Op
from .workload import OpStream, WorkloadSpec

BENCH_COLUMNS = ["timestamp_s", "threads", "target", "backend", "ops_done", "mops", "p50_lat_us", "p99_lat_us"]
DEMO_COLUMNS = ["interval_start_s", "optimized", "read_mops", "write_mops", "migrating"]
LATENCY_SLO = Slo(8, 100, 100, 1, 1)


def default_cluster(servers: int = 4, vm_memory: int = 32 * GiB) -> ClusterConfig:
    return ClusterConfig(servers, 64, 256 * GiB, {1: 1}, [VmSpec("A", 8, vm_memory, 1.0)])


def make_env(backend: str, cluster: ClusterConfig | None = None, seed: int = 0):
    cluster = cluster or default_cluster()
    if backend == "sim":
        return SimEnvironment(cluster, seed=seed)
    if backend == "socket":
        return SocketEnvironment(cluster, seed=seed)
    raise ValueError(f"unknown backend {backend!r}")


@dataclass
class OpRecord:
    thread: int
    seq: int
    is_read: bool
    key: int
    value: bytes
    issued_at: float
    completed_at: float = 0.0
    ok: bool = False
    got: bytes | None = None


@dataclass
class LoadDriver:
    """Closed-loop load on the sim backend: each app thread keeps ``window`` ops outstanding.

    Writes store ``record_size`` bytes encoding (thread, seq).  When
    ``own_keys`` is set every thread only touches keys congruent to its id, so
    the expected value of every read is known exactly.
    """

    client: RedyClient
    cache_id: str
    spec: WorkloadSpec
    window: int = 4
    stop_at: float = float("inf")
    max_ops: int | None = None
    own_keys: bool = False
    rate: float | None = None          # open loop: ops per microsecond per thread
    keep_records: bool = False
    records: list[OpRecord] = field(default_factory=list)
    issued: int = 0
    completed: int = 0

    def __post_init__(self):
        self.env = self.client.env
        self.h = self.client.handle(self.cache_id)
        self.streams = [OpStream(self.spec, t) for t in range(self.spec.threads)]
        self._armed = [False] * self.spec.threads
        self.latencies: list[tuple[float, float, bool]] = []     # (completed_at, latency, is_read)
        self.per_thread: list[list[int]] = [[] for _ in range(self.spec.threads)]

    @property
    def record_size(self) -> int:
        return self.spec.record_size

    def start(self) -> None:
        if self.rate is not None:
            for t in range(self.spec.threads):
                self.env.after(t / (self.rate * self.spec.threads), self._tick, t)
            return
        for t in range(self.spec.threads):
            self.h.app(("load", t)).on_progress = (lambda t=t: self._arm(t))
            self._arm(t)

    def _arm(self, t: int) -> None:
        if not self._armed[t]:
            self._armed[t] = True
            self.env.after(0.0, self._refill, t)

    def _stopped(self) -> bool:
        return self.env.now() >= self.stop_at or (self.max_ops is not None and self.issued >= self.max_ops)

    def _key(self, t: int, key: int) -> int:
        if not self.own_keys:
            return key
        n = self.spec.record_count
        k = key - key % self.spec.threads + t
        return k if k < n else t

    def _tick(self, t: int) -> None:
        if not self._stopped():
            self._issue_one(t)
            self.env.after(1.0 / self.rate, self._tick, t)

    def _refill(self, t: int) -> None:
        self._armed[t] = False
        app = self.h.app(("load", t))
        while app.window_used < self.window and not self._stopped():
            self._issue_one(t)

    def _issue_one(self, t: int) -> None:
        rs = self.record_size
        is_read, key = self.streams[t].next()
        key = self._key(t, key)
        seq = self.issued
        self.issued += 1
        if is_read:
            buf = bytearray(rs)
            rec = OpRecord(t, seq, True, key, b"", self.env.now())
            self.client.read(self.cache_id, buf, key * rs, rs, callback=self._done(rec, buf), thread=("load", t))
        else:
            value = (seq.to_bytes(8, "little") + bytes([t])).ljust(rs, b"\x5a")[:rs]
            rec = OpRecord(t, seq, False, key, value, self.env.now())
            self.client.write(self.cache_id, value, key * rs, rs, callback=self._done(rec, None), thread=("load", t))
        if self.keep_records:
            self.records.append(rec)

    def _done(self, rec: OpRecord, buf):
        def cb(ticket):
            rec.completed_at = ticket.completed_at
            rec.ok = ticket.error is None
            if buf is not None:
                rec.got = bytes(buf)
            self.completed += 1
            self.latencies.append((ticket.completed_at, ticket.completed_at - ticket.issued_at, rec.is_read))
            self.per_thread[rec.thread].append(rec.seq)
        return cb

    def run(self, timeout_us: float | None = None) -> None:
        self.start()
        self.env.run_until(lambda: self._stopped() and self.completed == self.issued, timeout_us)


def interval_rows(lat: list[tuple[float, float, bool]], t0: float, t1: float, interval_us: float,
                  threads: int, target: str, backend: str) -> list[list]:
    """One CSV row per interval of completed operations (times in microseconds)."""
    if not lat:
        return []
    done = np.array([x[0] for x in lat])
    lats = np.array([x[1] for x in lat])
    rows = []
    edges = np.arange(t0, t1 + interval_us * 0.5, interval_us)
    if len(edges) < 2:
        edges = np.array([t0, t0 + interval_us])
    for a, b in zip(edges[:-1], edges[1:]):
        m = (done >= a) & (done < b) if b < edges[-1] else (done >= a) & (done <= max(b, done.max()))
        n = int(m.sum())
        p50 = float(np.percentile(lats[m], 50)) if n else 0.0
        p99 = float(np.percentile(lats[m], 99)) if n else 0.0
        rows.append([round(float(b - t0) / 1e6, 6), threads, target, backend, n,
                     round(n / float(b - a), 6), round(p50, 3), round(p99, 3)])
    return rows


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def _socket_load(client: RedyClient, cid: str, spec: WorkloadSpec, ops: int, window: int, duration_s: float):
    """Real threads, each keeping at most ``window`` ops outstanding; wall-clock microseconds."""
    rs = spec.record_size
    stop_at = client.env.now() + duration_s * 1e6
    per_thread: list[list] = [[] for _ in range(spec.threads)]

    def worker(t):
        stream, got = OpStream(spec, t), per_thread[t]

        def cb(tk):
            got.append((tk.completed_at, tk.latency, tk.op is Op.READ))
        pending = []
        for _ in range(ops):
            if client.env.now() >= stop_at:
                break
            is_read, key = stream.next()
            if is_read:
                tk = client.read(cid, bytearray(rs), key * rs, rs, callback=cb, thread=("load", t))
            else:
                tk = client.write(cid, bytes(rs), key * rs, rs, callback=cb, thread=("load", t))
            pending.append(tk)
            if len(pending) >= window:
                client.wait(pending.pop(0))
        client.wait(*pending)
    threads = [threading.Thread(target=worker, args=(t,)) for t in range(spec.threads)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    return [x for lst in per_thread for x in lst]


def run_bench(spec: WorkloadSpec, target: str = "cache-direct", backend: str = "sim", out=None,
              duration_s: float = 0.01, interval_s: float | None = None, window: int = 1,
              slo: Slo = LATENCY_SLO, region_size: int = 64 * MiB, ops: int | None = None,
              tier_options: dict | None = None) -> list[list]:
    """Run a closed-loop benchmark and return (and optionally write) per-interval rows."""
    interval_us = (interval_s or duration_s) * 1e6
    if target == "tieredkv":
        from .tieredkv import bench_tieredkv
        rows = bench_tieredkv(spec, backend=backend, duration_s=duration_s, interval_s=interval_s,
                              ops=ops, **(tier_options or {}))
    elif target == "cache-direct":
        rows = _bench_cache(spec, backend, duration_s, interval_us, window, slo, region_size, ops)
    else:
        raise ValueError(f"unknown target {target!r}")
    if out is not None:
        write_csv(out, BENCH_COLUMNS, rows)
    return rows


def _bench_cache(spec, backend, duration_s, interval_us, window, slo, region_size, ops):
    env = make_env(backend, seed=spec.seed)
    try:
        client = RedyClient(env, region_size=region_size)
        capacity = max(spec.record_count * spec.record_size, 1)
        cid = client.create(capacity, slo)
        if ops == 0:
            return []
        t0 = env.now()
        if env.is_sim:
            drv = LoadDriver(client, cid, spec, window=window, stop_at=t0 + duration_s * 1e6, max_ops=ops)
            drv.run()
            lat = drv.latencies
            end = t0 + duration_s * 1e6
        else:
            lat = _socket_load(client, cid, spec, ops or 10 ** 9, window, duration_s)
            end = max([t0 + interval_us] + [x[0] for x in lat])
        return interval_rows(lat, t0, max(end, t0 + interval_us), interval_us, spec.threads, "cache-direct", backend)
    finally:
        env.close()


# -- migration demo ------------------------------------------------------------------------------

@dataclass
class DemoResult:
    rows: list[list]
    events: list[dict]
    paused_reads: int
    served_by_old_vm: int
    lost_writes: int
    stale_reads: int


def _rate(done: np.ndarray, a: float, b: float) -> float:
    return float(((done >= a) & (done < b)).sum()) / max(b - a, 1e-9)


def migrate_demo(schedule=((1, 1), (2, 2), (3, 4)), regions: int = 7, optimized: bool = True,
                 region_size: int = 4 * MiB, phase_us: float = 30_000.0, interval_us: float = 1000.0,
                 threads: int = 2, rate_mops: float = 0.2, read_fraction: float = 0.5, seed: int = 0,
                 out=None) -> DemoResult:
    """Migrate ``k`` regions at ``phase * phase_us`` for each (phase, k) while a read/write load runs.

    Returns per-interval read/write throughput plus, for each migration, the
    mean throughput during the migration relative to the preceding phase.
    The workload is checked against an exact per-thread oracle: every read
    must return the thread's latest write to that record, and the final cache
    image must hold every acknowledged write.
    """
    env = SimEnvironment(default_cluster(), seed=seed)
    client = RedyClient(env, region_size=region_size)
    rs = 16
    capacity = regions * region_size
    cid = client.create(capacity, LATENCY_SLO)
    spec = WorkloadSpec("uniform", record_count=capacity // rs, key_size=8, value_size=8,
                        read_fraction=read_fraction, threads=threads, seed=seed)
    end = (max(p for p, _ in schedule) + 1) * phase_us if schedule else phase_us
    drv = LoadDriver(client, cid, spec, stop_at=end, own_keys=True, keep_records=True,
                     rate=rate_mops / threads)
    h = client.handle(cid)
    events = []
    next_region = 0
    jobs = []

    def fire(k, start_region):
        idx = [(start_region + i) % regions for i in range(k)]
        job = client.migrate_regions(cid, idx, optimized=optimized, wait=False)
        events.append({"k": k, "regions": idx, "job": job, "start": env.now()})
        jobs.append(job)

    for phase, k in schedule:
        env.after(phase * phase_us, fire, k, next_region)
        next_region += k
    drv.run()
    env.run_until(lambda: all(j.done for j in jobs))

    # oracle: replay each thread's ops in issue order
    state: dict[int, bytes] = {}
    stale = 0
    for rec in sorted(drv.records, key=lambda r: (r.thread, r.seq)):
        if rec.is_read:
            if rec.got != state.get(rec.key, bytes(rs)):
                stale += 1
        elif rec.ok:
            state[rec.key] = rec.value
    lost = sum(client.read_sync(cid, key * rs, rs) != v for key, v in state.items())

    rd = np.array([x[0] for x in drv.latencies if x[2]])
    wr = np.array([x[0] for x in drv.latencies if not x[2]])
    rows = []
    for a in np.arange(0.0, end, interval_us):
        b = a + interval_us
        mig = any(e["start"] < b and (e["job"].report.finished_at or end) > a for e in events)
        rows.append([round(float(a) / 1e6, 6), int(optimized), round(_rate(rd, a, b), 6), round(_rate(wr, a, b), 6), int(mig)])
    for e in events:
        s, f = e["start"], e["job"].report.finished_at
        pre_a = max(0.0, s - phase_us / 2)
        e["finish"] = f
        e["read_dip"] = 1 - _rate(rd, s, f) / _rate(rd, pre_a, s)
        e["write_dip"] = 1 - _rate(wr, s, f) / _rate(wr, pre_a, s)
        e["failed"] = list(e["job"].report.failed)
        del e["job"]
    if out is not None:
        write_csv(out, DEMO_COLUMNS, rows)
    return DemoResult(rows, events, h.stats["paused_reads"], h.stats["served_by_old_vm"], lost, stale)

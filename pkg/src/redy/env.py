"""Execution environments for the cache client.

An environment bundles the cluster, the manager and a transport backend,
and gives the client a clock, a way to wake client threads, connections to
VMs and a driver for control-plane coroutines (migrations).

``SimEnvironment`` runs everything on one virtual clock in microseconds.
``SocketEnvironment`` runs each VM agent behind a TCP endpoint and each
client thread as a real thread; time is wall-clock.
"""
from __future__ import annotations

import threading
import time
from typing import Callable, Generator

from .clustersim import ClusterConfig, ClusterSim
from .core import VmSpec
from .errors import MigrationAborted, RedyError
from .manager import CacheManager, ModelStore, sim_launcher
from .server import CacheServer, ServerMode
from .transport.netmodel import NetworkModel
from .transport.sim import SimFabric, Simulator
from .transport.sock import SocketMigrationSource, SocketQueuePair, SocketServerEndpoint

# Coroutine steps yielded by control-plane generators:
#   ("sleep", us)                       wait on the environment clock
#   ("until", predicate)                wait until predicate() holds
#   ("copy", src_vm, token, dst_vm, dst_rid, nbytes)
#                                       pull a region from src into dst; raises
#                                       MigrationAborted if either side dies
Step = tuple
Coroutine = Generator[Step, object, object]


class TargetLost(MigrationAborted):
    """The destination VM of a copy went away."""


class Job:
    """Handle on a running control-plane coroutine."""

    def __init__(self, name: str):
        self.name = name
        self.done = False
        self.result = None
        self.error: BaseException | None = None
        self._event = threading.Event()

    def _finish(self, result=None, error=None):
        self.result, self.error, self.done = result, error, True
        self._event.set()


def _alive(host) -> bool:
    return host is not None and host.mode is not ServerMode.TERMINATED


class SimEnvironment:
    is_sim = True

    def __init__(self, cluster: ClusterSim | ClusterConfig, models: ModelStore | None = None,
                 net: NetworkModel | None = None, seed: int = 0):
        if isinstance(cluster, ClusterConfig):
            cluster = ClusterSim(cluster, seed)
        self.sim = Simulator()
        self.net = net or NetworkModel(seed=seed)
        self.fabric = SimFabric(self.sim, self.net)
        self.cluster = cluster
        self.manager = CacheManager(cluster, models, sim_launcher)
        cluster.subscribe(self._schedule_deadline)

    # -- clock -------------------------------------------------------------------
    def now(self) -> float:
        return self.sim.now

    def after(self, delay_us: float, fn: Callable, *args) -> None:
        self.sim.after(delay_us, fn, *args)

    def run_until(self, predicate: Callable[[], bool], timeout_us: float | None = None) -> bool:
        limit = None if timeout_us is None else self.sim.now + timeout_us
        return self.sim.run_until(predicate, limit)

    def run(self, until_us: float | None = None) -> None:
        self.sim.run(until_us)

    def sync_cluster(self) -> None:
        """Bring the cluster clock (seconds) up to the simulator clock."""
        t = self.sim.now / 1e6
        if t > self.cluster.clock:
            self.cluster.advance(t)

    def _schedule_deadline(self, vm_id: str, warning_s: float) -> None:
        if warning_s > 0:
            deadline = self.cluster.clock + warning_s
            self.sim.at(deadline * 1e6, self.cluster.advance, deadline)

    # -- threads and connections ------------------------------------------------------
    def start_thread(self, ct) -> None:
        pass

    def stop_thread(self, ct) -> None:
        pass

    def kicker(self, ct) -> Callable[[], None]:
        state = {"armed": False}

        def fire():
            state["armed"] = False
            ct.pump()

        def kick():
            if not state["armed"]:
                state["armed"] = True
                self.sim.after(0.0, fire)
        return kick

    def host(self, vm_id: str) -> CacheServer | None:
        return self.manager.hosts.get(vm_id)

    def connect(self, client_key, vm_id: str, config, distance: int, attach: list[int]):
        return self.fabric.connect(client_key, self.host(vm_id), config, 0, distance, existing=attach)

    def extend(self, qp, vm_id: str, config, distance: int, client_key, rids: list[int]):
        """Give an open connection access to more regions; returns the connection to use."""
        for rid, tok in qp.server.grant(qp.connection_id, rids):
            qp.tokens[rid] = tok
        return qp

    # -- coroutines ------------------------------------------------------------------
    def drive(self, gen: Coroutine, name: str = "job") -> Job:
        job = Job(name)

        def step(value=None, error=None):
            while True:
                try:
                    cmd = gen.throw(error) if error is not None else gen.send(value)
                except StopIteration as stop:
                    job._finish(stop.value)
                    return
                except BaseException as exc:       # surfaced through the job
                    job._finish(error=exc)
                    return
                value = error = None
                kind = cmd[0]
                if kind == "sleep":
                    self.sim.after(cmd[1], step)
                    return
                if kind == "until":
                    if cmd[1]():
                        continue
                    self._recheck(cmd[1], step)
                    return
                if kind == "copy":
                    _, src, token, dst, rid, nbytes = cmd
                    self.sim.after(self.net.migration_time(nbytes), self._copy_done, src, token, dst, rid, step)
                    return
                raise ValueError(f"unknown step {kind}")

        self.sim.after(0.0, step)
        return job

    def _recheck(self, pred, step):
        def check():
            if pred():
                step()
            else:
                self.sim.after(1.0, check)
        self.sim.after(1.0, check)

    def _copy_done(self, src, token, dst, rid, step):
        s, d = self.host(src), self.host(dst)
        if not _alive(d):
            step(error=TargetLost(f"target {dst} lost"))
            return
        if not _alive(s):
            step(error=MigrationAborted(f"source {src} terminated before the copy finished"))
            return
        moved = 0
        for off, data in s.serve_migration_reads(token):
            d.ingest(rid, off, data)
            moved += len(data)
        step(moved)

    def wait(self, job: Job, timeout_us: float | None = None) -> Job:
        self.run_until(lambda: job.done, timeout_us)
        return job

    def close(self) -> None:
        pass


class SocketEnvironment:
    """Real sockets and threads; VM agents run in-process behind TCP endpoints."""

    is_sim = False

    def __init__(self, cluster: ClusterSim | ClusterConfig, models: ModelStore | None = None, seed: int = 0,
                 chunk: int = 1 << 20):
        if isinstance(cluster, ClusterConfig):
            cluster = ClusterSim(cluster, seed)
        self.cluster = cluster
        self.endpoints: dict[str, SocketServerEndpoint] = {}
        self.chunk = chunk
        self.manager = CacheManager(cluster, models, self._launch)
        self._threads: dict[int, threading.Thread] = {}
        self._t0 = time.perf_counter()

    def _launch(self, vm_id: str, spec: VmSpec, region_size: int) -> CacheServer:
        host = sim_launcher(vm_id, spec, region_size)
        self.endpoints[vm_id] = SocketServerEndpoint(host)
        return host

    def now(self) -> float:
        return (time.perf_counter() - self._t0) * 1e6

    def after(self, delay_us: float, fn: Callable, *args) -> None:
        t = threading.Timer(delay_us / 1e6, fn, args)
        t.daemon = True
        t.start()

    def run_until(self, predicate: Callable[[], bool], timeout_us: float | None = 30e6) -> bool:
        deadline = None if timeout_us is None else time.perf_counter() + timeout_us / 1e6
        nap = 2e-5
        while not predicate():
            if deadline is not None and time.perf_counter() > deadline:
                return predicate()
            time.sleep(nap)
            nap = min(nap * 2, 1e-3)
        return True

    def sync_cluster(self) -> None:
        pass

    def start_thread(self, ct) -> None:
        ct._wake = threading.Event()
        ct._running = True

        def loop():
            while ct._running:
                if not ct.pump():
                    ct._wake.wait(0.002)
                    ct._wake.clear()
        th = threading.Thread(target=loop, name=f"client-{ct.index}", daemon=True)
        self._threads[id(ct)] = th
        th.start()

    def stop_thread(self, ct) -> None:
        ct._running = False
        ct._wake.set()
        th = self._threads.pop(id(ct), None)
        if th is not None and th is not threading.current_thread():
            th.join(timeout=5)

    def kicker(self, ct) -> Callable[[], None]:
        def kick():
            ev = getattr(ct, "_wake", None)
            if ev is not None:
                ev.set()
        return kick

    def host(self, vm_id: str) -> CacheServer | None:
        return self.manager.hosts.get(vm_id)

    def connect(self, client_key, vm_id: str, config, distance: int, attach: list[int]):
        return SocketQueuePair.connect(self.endpoints[vm_id].address, config, 0, attach=attach)

    def extend(self, qp, vm_id: str, config, distance: int, client_key, rids: list[int]):
        attach = sorted(set(qp.tokens) | set(rids))
        new, _ = self.connect(client_key, vm_id, config, distance, attach)
        return new

    def drive(self, gen: Coroutine, name: str = "job") -> Job:
        job = Job(name)

        def run():
            value, error = None, None
            while True:
                try:
                    cmd = gen.throw(error) if error is not None else gen.send(value)
                except StopIteration as stop:
                    job._finish(stop.value)
                    return
                except BaseException as exc:
                    job._finish(error=exc)
                    return
                value = error = None
                kind = cmd[0]
                if kind == "sleep":
                    time.sleep(cmd[1] / 1e6)
                elif kind == "until":
                    self.run_until(cmd[1], None)
                elif kind == "copy":
                    try:
                        value = self._copy(*cmd[1:])
                    except RedyError as exc:
                        error = exc
                else:
                    error = ValueError(f"unknown step {kind}")

        threading.Thread(target=run, name=name, daemon=True).start()
        return job

    def _copy(self, src, token, dst, rid, nbytes) -> int:
        d = self.host(dst)
        if not _alive(d):
            raise TargetLost(f"target {dst} lost")
        if not _alive(self.host(src)) or src not in self.endpoints:
            raise MigrationAborted(f"source {src} unreachable")
        source = SocketMigrationSource(self.endpoints[src].address, token)
        try:
            moved = 0
            for off in range(0, nbytes, self.chunk):
                data = source.read(off, min(self.chunk, nbytes - off))
                if not _alive(d):
                    raise TargetLost(f"target {dst} lost")
                if any(data):
                    d.ingest(rid, off, data)
                moved += len(data)
            return moved
        finally:
            source.close()

    def wait(self, job: Job, timeout_us: float | None = 60e6) -> Job:
        job._event.wait(None if timeout_us is None else timeout_us / 1e6)
        return job

    def close(self) -> None:
        for ep in self.endpoints.values():
            ep.stop()

"""Global cache manager: picks VMs and an RDMA configuration for each cache.

For every network distance the manager searches that distance's performance
model for a configuration meeting the SLO, then prices the cheapest set of
identical VMs that covers the requested memory and the configuration's
server cores.  The cheapest (distance, VM type, count) wins.
"""
from __future__ import annotations

import itertools
import json
import logging
import re
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .clustersim import DISTANCES, ClusterSim
from .core import DEFAULT_REGION_SIZE, INFINITE, RdmaConfig, SearchSpaceBounds, Slo, VmKind, VmSpec, regions_needed
from .errors import CapacityUnavailable, ConfigError, InvalidCache, RedyError, SloUnsatisfiable
from .perfmodel import PerfModel, SyntheticOracle, offline_model, search
from .server import CacheServer
from .transport.wire import MsgType, recv_frame, send_frame

log = logging.getLogger(__name__)

MIN_MODEL_RECORD, MAX_MODEL_RECORD = 4, 16 * 1024
MODEL_FILE = re.compile(r"model_r(\d+)_d(\d+)\.csv$")


def model_record_size(record_size: int) -> int:
    """Record size of the model used for ``record_size``: next power of two, clamped to [4 B, 16 KiB]."""
    r = MIN_MODEL_RECORD
    while r < record_size and r < MAX_MODEL_RECORD:
        r *= 2
    return r


class ModelStore:
    """Performance models keyed by (record size, distance), built on first use."""

    def __init__(self, builder: Callable[[int, int], PerfModel] | None = None, c_max: int = 8, q_max: int = 16):
        self.c_max, self.q_max = c_max, q_max
        self.builder = builder or self._synthetic
        self.models: dict[tuple[int, int], PerfModel] = {}

    def _synthetic(self, record_size: int, distance: int) -> PerfModel:
        bounds = SearchSpaceBounds.for_record_size(self.c_max, record_size, 1, self.q_max)
        return offline_model(bounds, SyntheticOracle(), record_size, distance)

    def get(self, record_size: int, distance: int) -> PerfModel:
        key = (model_record_size(record_size), distance)
        if key not in self.models:
            log.info("building model for record %d B at distance %d", *key)
            self.models[key] = self.builder(*key)
        return self.models[key]

    def available(self, record_size: int) -> list[int]:
        """Distances with a model for this record size; builds lazily when a builder exists."""
        rs = model_record_size(record_size)
        if self.builder is not None:
            return list(DISTANCES)
        return sorted(d for r, d in self.models if r == rs)

    @classmethod
    def from_dir(cls, path) -> "ModelStore":
        store = cls()
        store.builder = None
        for f in sorted(Path(path).glob("model_r*_d*.csv")):
            m = MODEL_FILE.search(f.name)
            if m:
                rs, d = int(m.group(1)), int(m.group(2))
                store.models[(rs, d)] = PerfModel.from_csv(f, rs, d)
        if not store.models:
            raise ConfigError(f"no model_r<bytes>_d<switches>.csv files in {path}")
        return store


@dataclass(frozen=True)
class AllocationRequest:
    memory: int
    slo: Slo
    duration: float = INFINITE
    region_size: int = DEFAULT_REGION_SIZE

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1 byte")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def regions(self) -> int:
        return regions_needed(self.memory, self.region_size)


@dataclass(frozen=True)
class VmAssignment:
    vm_id: str
    spec: VmSpec
    region_count: int


@dataclass
class AllocationResult:
    cache_id: str
    vms: list[VmAssignment]
    config: RdmaConfig
    distance: int
    region_size: int = DEFAULT_REGION_SIZE

    @property
    def cost(self) -> float:
        return sum(v.spec.price for v in self.vms)

    @property
    def total_regions(self) -> int:
        return sum(v.region_count for v in self.vms)


@dataclass(frozen=True)
class VmPlan:
    spec: VmSpec
    region_counts: tuple[int, ...]

    @property
    def cost(self) -> float:
        return self.spec.price * len(self.region_counts)


def cores_needed(s: int, regions: int, total_regions: int) -> int:
    return -(-s * regions // total_regions)


def spread(total: int, k: int) -> tuple[int, ...]:
    """``total`` regions over ``k`` VMs as evenly as possible, larger shares first."""
    q, r = divmod(total, k)
    return tuple(q + 1 if i < r else q for i in range(k))


def plan_for_type(spec: VmSpec, total_regions: int, s: int, region_size: int) -> VmPlan | None:
    """Fewest VMs of one type that hold every region and provide the configuration's server cores."""
    per_vm = spec.memory // region_size
    if per_vm < 1:
        return None
    for k in range(-(-total_regions // per_vm), total_regions + 1):
        counts = spread(total_regions, k)
        if counts[0] <= per_vm and spec.cores >= cores_needed(s, counts[0], total_regions):
            return VmPlan(spec, counts)
    return None


def eligible_types(menu: list[VmSpec], duration: float) -> list[VmSpec]:
    if duration == INFINITE:
        return [v for v in menu if v.kind is VmKind.ON_DEMAND]
    return list(menu)


@dataclass
class CacheRecord:
    cache_id: str
    request: AllocationRequest
    config: RdmaConfig
    distance: int
    spec: VmSpec
    vms: list[list]       # [vm_id, region_count], in region order
    listener: Callable | None = None

    def result(self) -> AllocationResult:
        return AllocationResult(self.cache_id, [VmAssignment(v, self.spec, n) for v, n in self.vms],
                                self.config, self.distance, self.request.region_size)


def sim_launcher(vm_id: str, spec: VmSpec, region_size: int) -> CacheServer:
    return CacheServer(vm_id, spec.memory, region_size, server_threads=max(1, spec.cores))


class CacheManager:
    """Serialises Allocate / Reallocate / Deallocate and relays reclamation alerts."""

    def __init__(self, cluster: ClusterSim, models: ModelStore | None = None,
                 launcher: Callable[[str, VmSpec, int], object] = sim_launcher):
        self.cluster = cluster
        self.models = models or ModelStore()
        self.launcher = launcher
        self.caches: dict[str, CacheRecord] = {}
        self.hosts: dict[str, object] = {}
        self.owner: dict[str, str] = {}
        self.alerts: list[tuple[str, str, float]] = []
        self._ids = itertools.count(1)
        self._lock = threading.RLock()
        cluster.subscribe(self.notify_reclamation)
        cluster.terminate_listeners.append(self._terminated)

    # -- selection ----------------------------------------------------------------
    def candidates(self, req: AllocationRequest) -> list[tuple[float, int, int, str, RdmaConfig, VmPlan]]:
        """Every feasible (cost, distance, vm count, type, config, plan), cheapest first."""
        out = []
        types = eligible_types(self.cluster.vm_menu, req.duration)
        for d in self.models.available(req.slo.record_size):
            res = search(self.models.get(req.slo.record_size, d), req.slo)
            if not res.found:
                continue
            cfg = res.config
            for spec in types:
                plan = plan_for_type(spec, req.regions, cfg.s, req.region_size)
                if plan is None:
                    continue
                if not self.cluster.can_place([spec] * len(plan.region_counts), d):
                    continue
                out.append((plan.cost, d, len(plan.region_counts), spec.vm_type, cfg, plan))
        out.sort(key=lambda t: t[:4])
        return out

    def _any_config(self, slo: Slo) -> bool:
        return any(search(self.models.get(slo.record_size, d), slo).found
                   for d in self.models.available(slo.record_size))

    def _launch(self, spec: VmSpec, distance: int, cache_id: str, region_size: int) -> str:
        vm_id = self.cluster.allocate_vm(spec, distance)
        self.hosts[vm_id] = self.launcher(vm_id, self.cluster.vms[vm_id].spec, region_size)
        self.owner[vm_id] = cache_id
        return vm_id

    def _drop(self, vm_id: str) -> None:
        self.owner.pop(vm_id, None)
        host = self.hosts.pop(vm_id, None)
        self.cluster.release(vm_id)
        if host is not None and hasattr(host, "terminate"):
            host.terminate()

    # -- RPC surface --------------------------------------------------------------
    def allocate(self, req: AllocationRequest, listener: Callable | None = None) -> AllocationResult:
        with self._lock:
            options = self.candidates(req)
            if not options:
                if not self._any_config(req.slo):
                    raise SloUnsatisfiable(f"no configuration at any distance meets {req.slo}")
                raise CapacityUnavailable(f"no VM set can host {req.memory} bytes")
            _, d, _, _, cfg, plan = options[0]
            cache_id = f"cache{next(self._ids)}"
            launched = []
            try:
                for n in plan.region_counts:
                    launched.append([self._launch(plan.spec, d, cache_id, req.region_size), n])
            except RedyError:
                for vm_id, _ in launched:
                    self._drop(vm_id)
                raise
            rec = CacheRecord(cache_id, req, cfg, d, self.cluster.vms[launched[0][0]].spec, launched, listener)
            self.caches[cache_id] = rec
            log.info("allocated %s: %s at distance %d on %d x %s", cache_id, cfg, d, len(launched), plan.spec.vm_type)
            return rec.result()

    def _record(self, cache_id: str) -> CacheRecord:
        rec = self.caches.get(cache_id)
        if rec is None:
            raise InvalidCache(f"unknown cache {cache_id}")
        return rec

    def reallocate(self, cache_id: str, delta_regions: int, release_from: list[str] | None = None) -> AllocationResult:
        """Grow or shrink by whole regions, keeping the VM type, config and distance.

        A shrink takes regions from the VMs in ``release_from`` (one entry per
        region) or, by default, from the tail VM.
        """
        with self._lock:
            rec = self._record(cache_id)
            total = sum(n for _, n in rec.vms)
            new_total = total + delta_regions
            if new_total < 1:
                raise ValueError("a cache keeps at least one region")
            per_vm = rec.spec.memory // rec.request.region_size
            if delta_regions > 0:
                counts = [n for _, n in rec.vms]
                left = delta_regions
                for i in range(len(counts)):            # headroom first, last VM first
                    j = len(counts) - 1 - i
                    take = min(per_vm - counts[j], left)
                    counts[j] += take
                    left -= take
                extra = spread(left, -(-left // per_vm)) if left else ()
                need = cores_needed(rec.config.s, max(counts + list(extra)), new_total)
                if need > rec.spec.cores:
                    raise CapacityUnavailable("VM type cannot supply the server cores")
                if extra and not self.cluster.can_place([rec.spec] * len(extra), rec.distance):
                    raise CapacityUnavailable(f"cannot grow {cache_id} by {delta_regions} regions")
                added = []
                for n in extra:
                    added.append([self._launch(rec.spec, rec.distance, cache_id, rec.request.region_size), n])
                for v, n in zip(rec.vms, counts):
                    v[1] = n
                rec.vms.extend(added)
            elif release_from is not None:
                if len(release_from) != -delta_regions:
                    raise ValueError("release_from needs one VM per released region")
                counts = {v[0]: v for v in rec.vms}
                for vm_id in release_from:
                    counts[vm_id][1] -= 1
                for v in [v for v in rec.vms if v[1] <= 0]:
                    rec.vms.remove(v)
                    self._drop(v[0])
            elif delta_regions < 0:
                left = -delta_regions
                while left:
                    vm = rec.vms[-1]
                    take = min(vm[1], left)
                    vm[1] -= take
                    left -= take
                    if vm[1] == 0:
                        rec.vms.pop()
                        self._drop(vm[0])
            rec.request = AllocationRequest(new_total * rec.request.region_size, rec.request.slo,
                                            rec.request.duration, rec.request.region_size)
            return rec.result()

    def deallocate(self, cache_id: str) -> None:
        with self._lock:
            rec = self.caches.pop(cache_id, None)
            if rec is None:
                raise InvalidCache(f"unknown cache {cache_id}")
            for vm_id, _ in rec.vms:
                self._drop(vm_id)

    def provision(self, cache_id: str) -> str:
        """A fresh VM of the cache's type and distance, holding no regions yet."""
        with self._lock:
            rec = self._record(cache_id)
            vm_id = self._launch(rec.spec, rec.distance, cache_id, rec.request.region_size)
            rec.vms.append([vm_id, 0])
            return vm_id

    def moved(self, cache_id: str, src_vm: str, dst_vm: str, count: int = 1) -> None:
        """Book ``count`` regions as moved; a source left empty is released."""
        with self._lock:
            rec = self._record(cache_id)
            counts = {v[0]: v for v in rec.vms}
            if src_vm in counts:
                counts[src_vm][1] -= count
            counts[dst_vm][1] += count
            if src_vm in counts and counts[src_vm][1] <= 0:
                rec.vms.remove(counts[src_vm])
                self._drop(src_vm)

    def retire(self, vm_id: str) -> None:
        """Release a VM whose regions have all moved elsewhere."""
        with self._lock:
            self._drop(vm_id)

    def record(self, cache_id: str) -> CacheRecord:
        return self._record(cache_id)

    def notify_reclamation(self, vm_id: str, warning_s: float) -> bool:
        """Forward a reclamation or failure alert to the owning cache's client."""
        cache_id = self.owner.get(vm_id)
        if cache_id is None or cache_id not in self.caches:
            log.warning("reclamation for unowned VM %s ignored", vm_id)
            return False
        self.alerts.append((cache_id, vm_id, warning_s))
        if warning_s == 0 and vm_id in self.hosts:
            host = self.hosts[vm_id]
            if hasattr(host, "terminate"):
                host.terminate()
        rec = self.caches[cache_id]
        if rec.listener is not None:
            rec.listener(vm_id, warning_s)
        return True

    def _terminated(self, vm_id: str) -> None:
        # the cluster force-terminated a reclaimed VM at its deadline
        host = self.hosts.pop(vm_id, None)
        self.owner.pop(vm_id, None)
        if host is not None and hasattr(host, "terminate"):
            host.terminate()

    def host(self, vm_id: str):
        return self.hosts[vm_id]


# -- RPC over the transport framing ---------------------------------------------------

def _slo_to_json(slo: Slo) -> dict:
    return {"record_size": slo.record_size, "read_latency_max": slo.read_latency_max,
            "write_latency_max": slo.write_latency_max, "read_throughput_min": slo.read_throughput_min,
            "write_throughput_min": slo.write_throughput_min}


def _result_to_json(r: AllocationResult) -> dict:
    return {"cache_id": r.cache_id, "config": list(r.config.as_tuple()), "distance": r.distance,
            "region_size": r.region_size,
            "vms": [{"vm_id": v.vm_id, "type": v.spec.vm_type, "cores": v.spec.cores, "memory": v.spec.memory,
                     "price": v.spec.price, "kind": v.spec.kind.value, "regions": v.region_count} for v in r.vms]}


def _result_from_json(d: dict) -> AllocationResult:
    vms = [VmAssignment(v["vm_id"], VmSpec(v["type"], v["cores"], v["memory"], v["price"], d["distance"],
                                           VmKind(v["kind"])), v["regions"]) for v in d["vms"]]
    return AllocationResult(d["cache_id"], vms, RdmaConfig(*d["config"]), d["distance"], d["region_size"])


ERRORS = {cls.__name__: cls for cls in (SloUnsatisfiable, CapacityUnavailable, InvalidCache, ConfigError)}


class ManagerRpcServer:
    """Serves Allocate / Reallocate / Deallocate / NotifyReclamation as JSON frames."""

    def __init__(self, manager: CacheManager, host: str = "127.0.0.1", port: int = 0):
        self.manager = manager
        self.sock = socket.create_server((host, port))
        self.address = self.sock.getsockname()[:2]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept, daemon=True)
        self._thread.start()

    def _accept(self):
        while not self._stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _dispatch(self, msg: dict) -> dict:
        m = self.manager
        op = msg.get("op")
        if op == "allocate":
            slo = Slo(**msg["slo"])
            dur = INFINITE if msg.get("duration") is None else float(msg["duration"])
            req = AllocationRequest(int(msg["memory"]), slo, dur, int(msg.get("region_size", DEFAULT_REGION_SIZE)))
            return {"result": _result_to_json(m.allocate(req))}
        if op == "reallocate":
            return {"result": _result_to_json(m.reallocate(msg["cache_id"], int(msg["delta_regions"])))}
        if op == "deallocate":
            m.deallocate(msg["cache_id"])
            return {"ok": True}
        if op == "notify_reclamation":
            return {"ok": m.notify_reclamation(msg["vm_id"], float(msg["warning_s"]))}
        raise ConfigError(f"unknown manager op {op!r}")

    def _serve(self, conn: socket.socket):
        with conn:
            while True:
                try:
                    fr = recv_frame(conn)
                except OSError:
                    return
                if fr is None:
                    return
                mtype, body = fr
                if mtype != MsgType.MANAGER_REQUEST:
                    return
                try:
                    reply = self._dispatch(json.loads(body))
                except (RedyError, KeyError, TypeError, ValueError) as exc:
                    reply = {"error": type(exc).__name__, "message": str(exc)}
                send_frame(conn, MsgType.MANAGER_REPLY, json.dumps(reply).encode())

    def stop(self):
        self._stop.set()
        self.sock.close()


@dataclass
class ManagerRpcClient:
    address: tuple
    _sock: socket.socket | None = field(default=None, repr=False)

    def _call(self, msg: dict) -> dict:
        if self._sock is None:
            self._sock = socket.create_connection(tuple(self.address))
        send_frame(self._sock, MsgType.MANAGER_REQUEST, json.dumps(msg).encode())
        fr = recv_frame(self._sock)
        if fr is None:
            raise RedyError("manager closed the connection")
        reply = json.loads(fr[1])
        if "error" in reply:
            raise ERRORS.get(reply["error"], RedyError)(reply["message"])
        return reply

    def allocate(self, memory: int, slo: Slo, duration: float = INFINITE,
                 region_size: int = DEFAULT_REGION_SIZE) -> AllocationResult:
        reply = self._call({"op": "allocate", "memory": memory, "slo": _slo_to_json(slo),
                            "duration": None if duration == INFINITE else duration, "region_size": region_size})
        return _result_from_json(reply["result"])

    def reallocate(self, cache_id: str, delta_regions: int) -> AllocationResult:
        return _result_from_json(self._call({"op": "reallocate", "cache_id": cache_id,
                                             "delta_regions": delta_regions})["result"])

    def deallocate(self, cache_id: str) -> None:
        self._call({"op": "deallocate", "cache_id": cache_id})

    def notify_reclamation(self, vm_id: str, warning_s: float) -> bool:
        return self._call({"op": "notify_reclamation", "vm_id": vm_id, "warning_s": warning_s})["ok"]

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None

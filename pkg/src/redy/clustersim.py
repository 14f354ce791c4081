"""Seeded discrete-event model of the cluster that Redy borrows memory from.

Servers live at one of three network distances (1, 3 or 5 switches).  VMs are
carved out of a server's free cores and memory; spot VMs can be reclaimed with
a 30-120 s warning and any VM can fail outright.  Stranding events model the
moment another tenant takes every core on a server while memory is left
unallocated; their durations follow a log-normal fitted to measured quartiles.
"""
from __future__ import annotations

import csv
import heapq
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize, stats

from .core import GiB, VmKind, VmSpec
from .errors import CapacityUnavailable, ConfigError, InvalidOperation

log = logging.getLogger(__name__)

STRANDING_QUARTILES_MIN = (6.0, 13.0, 22.0)
MIN_WARNING_S, MAX_WARNING_S = 30.0, 120.0
DISTANCES = (1, 3, 5)

Listener = Callable[[str, float], None]


@lru_cache(maxsize=None)
def fit_stranding_lognormal(quartiles: tuple[float, float, float] = STRANDING_QUARTILES_MIN) -> tuple[float, float]:
    """(mu, sigma) of ln(minutes) minimising the worst relative quartile error."""
    z = stats.norm.ppf([0.25, 0.5, 0.75])
    target = np.asarray(quartiles)

    def worst(p):
        mu, sigma = p
        return np.max(np.abs(np.exp(mu + abs(sigma) * z) / target - 1.0))

    x0 = np.polyfit(z, np.log(target), 1)[::-1]   # log-space least squares as the start
    res = optimize.minimize(worst, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12})
    return float(res.x[0]), float(abs(res.x[1]))


@dataclass(frozen=True)
class StrandingEvent:
    server_id: int
    start: float
    duration: float
    stranded_memory: int

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def end(self) -> float:
        return self.start + self.duration


def sample_stranding_durations(seed: int, n: int) -> np.ndarray:
    """``n`` stranding durations in seconds."""
    mu, sigma = fit_stranding_lognormal()
    return np.random.default_rng(seed).lognormal(mu, sigma, n) * 60.0


def generate_stranding_events(seed: int, horizon: float, servers: int = 1, rate_per_hour: float = 2.0,
                              memory_range: tuple[int, int] = (GiB, 64 * GiB)) -> list[StrandingEvent]:
    """Poisson arrivals per server over ``horizon`` seconds, log-normal durations."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    mu, sigma = fit_stranding_lognormal()
    rng = np.random.default_rng(seed)
    events = []
    for sid in range(servers):
        t = 0.0
        while True:
            t += rng.exponential(3600.0 / rate_per_hour)
            if t >= horizon:
                break
            dur = float(rng.lognormal(mu, sigma) * 60.0)
            mem = int(rng.integers(memory_range[0], memory_range[1] + 1))
            events.append(StrandingEvent(sid, t, dur, mem))
    events.sort(key=lambda e: (e.start, e.server_id))
    return events


@dataclass
class Server:
    server_id: int
    cores: int
    memory: int
    distance: int
    used_cores: int = 0
    used_memory: int = 0
    vms: set = field(default_factory=set)
    stranding: StrandingEvent | None = None
    tenant_cores: int = 0
    tenant_memory: int = 0

    @property
    def free_cores(self) -> int:
        return self.cores - self.used_cores - self.tenant_cores

    @property
    def free_memory(self) -> int:
        return self.memory - self.used_memory - self.tenant_memory


@dataclass
class VmInstance:
    vm_id: str
    spec: VmSpec
    server_id: int
    started: float
    reclaim_at: float | None = None


@dataclass(frozen=True)
class LogEntry:
    time: float
    kind: str
    server_id: int | None = None
    vm_id: str | None = None
    detail: str = ""


@dataclass
class ClusterConfig:
    servers: int
    cores_per_server: int
    memory_per_server: int
    distance_mix: dict[int, float]
    vm_menu: list[VmSpec]
    stranding_rate_per_hour: float = 2.0
    reclaim_rate_per_hour: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterConfig":
        try:
            menu = [VmSpec(r["type"], int(r["cores"]), int(float(r["memory_gb"]) * GiB), float(r["price"]),
                           kind=VmKind(r.get("kind", "on_demand"))) for r in d["vm_menu"]]
            mix = {int(k): float(v) for k, v in d.get("distance_mix", {"1": 1.0}).items()}
            cfg = cls(int(d["servers"]), int(d["cores_per_server"]), int(float(d["memory_gb_per_server"]) * GiB),
                      mix, menu, float(d.get("stranding_rate_per_hour", 2.0)),
                      float(d.get("reclaim_rate_per_hour", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad cluster config: {exc}") from exc
        if cfg.servers < 1 or not menu or any(k not in DISTANCES for k in mix) or sum(mix.values()) <= 0:
            raise ConfigError("cluster config needs servers >= 1, a VM menu and distances in {1, 3, 5}")
        return cfg

    @classmethod
    def from_file(cls, path) -> "ClusterConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read cluster config {path}: {exc}") from exc

    def server_distances(self) -> list[int]:
        """Distances per server, largest-remainder apportioning of the mix."""
        total = sum(self.distance_mix.values())
        keys = sorted(self.distance_mix)
        quota = [self.distance_mix[k] / total * self.servers for k in keys]
        counts = [int(q) for q in quota]
        for i in sorted(range(len(keys)), key=lambda i: counts[i] - quota[i])[:self.servers - sum(counts)]:
            counts[i] += 1
        return [k for k, n in zip(keys, counts) for _ in range(n)]


class ClusterSim:
    """Virtual-clock cluster state; all mutation happens through its methods or queued events."""

    def __init__(self, config: ClusterConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.servers = [Server(i, config.cores_per_server, config.memory_per_server, d)
                        for i, d in enumerate(config.server_distances())]
        self.vms: dict[str, VmInstance] = {}
        self.clock = 0.0
        self.log: list[LogEntry] = []
        self.listeners: list[Listener] = []
        self.terminate_listeners: list[Callable[[str], None]] = []
        self._queue: list = []
        self._seq = 0
        self._next_vm = 0

    @property
    def vm_menu(self) -> list[VmSpec]:
        return self.config.vm_menu

    def subscribe(self, fn: Listener) -> None:
        """``fn(vm_id, warning_s)`` runs on every reclamation or failure."""
        self.listeners.append(fn)

    def _record(self, kind, server_id=None, vm_id=None, detail=""):
        self.log.append(LogEntry(self.clock, kind, server_id, vm_id, detail))

    def _schedule(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self._queue, (t, self._seq, kind, payload))
        self._seq += 1

    # -- accounting ---------------------------------------------------------------
    def totals(self) -> dict[str, int]:
        return {"cores": sum(s.cores for s in self.servers), "memory": sum(s.memory for s in self.servers),
                "free_cores": sum(s.free_cores for s in self.servers),
                "free_memory": sum(s.free_memory for s in self.servers)}

    def check_conservation(self) -> bool:
        for s in self.servers:
            vms = [self.vms[v].spec for v in s.vms]
            if s.used_cores != sum(v.cores for v in vms) or s.used_memory != sum(v.memory for v in vms):
                return False
            if s.free_cores < 0 or s.free_memory < 0:
                return False
            if s.used_cores + s.tenant_cores + s.free_cores != s.cores:
                return False
            if s.used_memory + s.tenant_memory + s.free_memory != s.memory:
                return False
        return True

    def free_memory_at(self, distance: int) -> int:
        return sum(s.free_memory for s in self.servers if s.distance == distance)

    # -- VM lifecycle -------------------------------------------------------------
    def _fits(self, s: Server, spec: VmSpec) -> bool:
        if s.stranding is not None and spec.cores > 0:
            return False
        return s.free_cores >= spec.cores and s.free_memory >= spec.memory

    def can_place(self, specs: list[VmSpec], distance: int) -> bool:
        """Whether all ``specs`` fit at ``distance`` simultaneously (first-fit, same order as allocation)."""
        room = {s.server_id: [s.free_cores, s.free_memory] for s in self.servers if s.distance == distance}
        for spec in specs:
            for s in self.servers:
                r = room.get(s.server_id)
                if r is None or (s.stranding is not None and spec.cores > 0):
                    continue
                if r[0] >= spec.cores and r[1] >= spec.memory:
                    r[0] -= spec.cores
                    r[1] -= spec.memory
                    break
            else:
                return False
        return True

    def allocate_vm(self, spec: VmSpec, distance: int | None = None) -> str:
        order = sorted(self.servers, key=lambda s: (s.distance, s.server_id))
        if distance is not None:
            order = [s for s in order if s.distance == distance]
        for s in order:
            if self._fits(s, spec):
                vm_id = f"vm{self._next_vm}"
                self._next_vm += 1
                placed = VmSpec(spec.vm_type, spec.cores, spec.memory, spec.price, s.distance, spec.kind)
                s.used_cores += spec.cores
                s.used_memory += spec.memory
                s.vms.add(vm_id)
                self.vms[vm_id] = VmInstance(vm_id, placed, s.server_id, self.clock)
                self._record("allocate", s.server_id, vm_id, f"{spec.vm_type} {spec.kind.value}")
                return vm_id
        raise CapacityUnavailable(f"no server at distance {distance} fits {spec.vm_type}")

    def release(self, vm_id: str) -> None:
        vm = self.vms.pop(vm_id, None)
        if vm is None:
            return
        s = self.servers[vm.server_id]
        s.used_cores -= vm.spec.cores
        s.used_memory -= vm.spec.memory
        s.vms.discard(vm_id)
        self._record("release", s.server_id, vm_id)

    def _notify(self, vm_id: str, warning: float) -> None:
        for fn in list(self.listeners):
            fn(vm_id, warning)

    def reclaim_spot(self, vm_id: str, warning: float) -> float:
        """Warn now, terminate at clock + warning; returns the deadline."""
        vm = self.vms.get(vm_id)
        if vm is None:
            raise InvalidOperation(f"unknown VM {vm_id}")
        if vm.spec.kind is not VmKind.SPOT:
            raise InvalidOperation(f"{vm_id} is not a spot VM")
        if not MIN_WARNING_S <= warning <= MAX_WARNING_S:
            raise InvalidOperation(f"warning must be within [{MIN_WARNING_S}, {MAX_WARNING_S}] s")
        if vm.reclaim_at is not None:
            return vm.reclaim_at
        vm.reclaim_at = self.clock + warning
        self._schedule(vm.reclaim_at, "terminate", vm_id)
        self._record("reclaim_warning", vm.server_id, vm_id, f"warning={warning:g}")
        self._notify(vm_id, warning)
        return vm.reclaim_at

    def fail_vm(self, vm_id: str) -> bool:
        vm = self.vms.get(vm_id)
        if vm is None:
            return False
        self._record("fail", vm.server_id, vm_id)
        self.release(vm_id)
        self._notify(vm_id, 0.0)
        return True

    # -- stranding ----------------------------------------------------------------
    def add_stranding(self, events: list[StrandingEvent]) -> None:
        for e in events:
            if not 0 <= e.server_id < len(self.servers):
                raise ValueError(f"unknown server {e.server_id}")
            self._schedule(e.start, "strand_start", e)

    def _strand_start(self, e: StrandingEvent) -> None:
        s = self.servers[e.server_id]
        if s.stranding is not None or s.free_memory < GiB:
            self._record("strand_skip", s.server_id, detail="busy or under 1 GiB free")
            return
        keep = min(e.stranded_memory, s.free_memory)
        s.tenant_cores = s.free_cores
        s.tenant_memory = s.free_memory - keep
        s.stranding = e
        self._schedule(e.end, "strand_end", e)
        self._record("strand_start", s.server_id, detail=f"memory={keep} duration={e.duration:.1f}")

    def _strand_end(self, e: StrandingEvent) -> None:
        s = self.servers[e.server_id]
        if s.stranding is not e:
            return
        s.tenant_cores = s.tenant_memory = 0
        s.stranding = None
        self._record("strand_end", s.server_id)

    # -- event loop ---------------------------------------------------------------
    def _random_reclaims(self, until: float) -> None:
        rate = self.config.reclaim_rate_per_hour
        if rate <= 0:
            return
        t = self.clock
        while True:
            t += self.rng.exponential(3600.0 / rate)
            if t >= until:
                break
            self._schedule(t, "random_reclaim", float(self.rng.uniform(MIN_WARNING_S, MAX_WARNING_S)))

    def advance(self, until: float) -> None:
        """Process every queued event with time <= ``until`` and move the clock there."""
        if until < self.clock:
            raise ValueError("clock cannot move backwards")
        self._random_reclaims(until)
        while self._queue and self._queue[0][0] <= until:
            t, _, kind, payload = heapq.heappop(self._queue)
            self.clock = t
            if kind == "terminate":
                if payload in self.vms:
                    self._record("terminate", self.vms[payload].server_id, payload)
                    self.release(payload)
                    for fn in list(self.terminate_listeners):
                        fn(payload)
            elif kind == "strand_start":
                self._strand_start(payload)
            elif kind == "strand_end":
                self._strand_end(payload)
            elif kind == "random_reclaim":
                spot = sorted(v for v, vm in self.vms.items() if vm.spec.kind is VmKind.SPOT and vm.reclaim_at is None)
                if spot:
                    self.reclaim_spot(spot[int(self.rng.integers(len(spot)))], payload)
        self.clock = until

    def run(self, horizon: float) -> list[LogEntry]:
        """Generate stranding for every server and play the cluster out to ``horizon``."""
        self.add_stranding(generate_stranding_events(self.seed, horizon, len(self.servers),
                                                     self.config.stranding_rate_per_hour))
        self.advance(horizon)
        return self.log

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "kind", "server_id", "vm_id", "detail"])
            for e in self.log:
                w.writerow([f"{e.time:.6f}", e.kind, "" if e.server_id is None else e.server_id,
                            e.vm_id or "", e.detail])

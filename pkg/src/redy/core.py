"""Shared value types and the region table.

All sizes are bytes, latencies microseconds and throughputs million ops/sec
unless a field name says otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

from .errors import AddressOutOfBounds, InvalidEntry

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30

DEFAULT_REGION_SIZE = GiB
BATCH_BYTES_CAP = 4096
INFINITE = math.inf


@dataclass(frozen=True)
class Slo:
    record_size: int
    read_latency_max: float
    write_latency_max: float
    read_throughput_min: float = 0.0
    write_throughput_min: float = 0.0

    def __post_init__(self):
        if self.record_size < 1:
            raise ValueError("record_size must be >= 1")
        if not (self.read_latency_max > 0 and self.write_latency_max > 0):
            raise ValueError("latency ceilings must be > 0")
        if self.read_throughput_min < 0 or self.write_throughput_min < 0:
            raise ValueError("throughput floors must be >= 0")

    @classmethod
    def symmetric(cls, record_size: int, latency_max: float, throughput_min: float = 0.0) -> "Slo":
        return cls(record_size, latency_max, latency_max, throughput_min, throughput_min)


@dataclass(frozen=True, order=True)
class RdmaConfig:
    """Client threads, server threads, batch size and queue depth."""

    c: int
    s: int
    b: int
    q: int

    def __post_init__(self):
        if self.c < 1:
            raise ValueError(f"c must be >= 1, got {self.c}")
        if not 0 <= self.s <= self.c:
            raise ValueError(f"s must lie in [0, c], got s={self.s} c={self.c}")
        if self.b < 1:
            raise ValueError(f"b must be >= 1, got {self.b}")
        if self.s == 0 and self.b != 1:
            raise ValueError("batching requires server threads (s=0 forces b=1)")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.c, self.s, self.b, self.q)


def max_batch_for(record_size: int) -> int:
    return -(-BATCH_BYTES_CAP // record_size)


@dataclass(frozen=True)
class SearchSpaceBounds:
    c_max: int
    b_max: int
    q_min: int = 1
    q_max: int = 16

    def __post_init__(self):
        if self.c_max < 1 or self.b_max < 1:
            raise ValueError("c_max and b_max must be >= 1")
        if not 1 <= self.q_min <= self.q_max:
            raise ValueError("need 1 <= q_min <= q_max")

    @classmethod
    def for_record_size(cls, c_max: int, record_size: int, q_min: int = 1, q_max: int = 16):
        return cls(c_max, max_batch_for(record_size), q_min, q_max)

    @property
    def q_values(self) -> int:
        return self.q_max - self.q_min + 1


class VmKind(str, Enum):
    ON_DEMAND = "on_demand"
    SPOT = "spot"


@dataclass(frozen=True)
class VmSpec:
    vm_type: str
    cores: int
    memory: int
    price: float
    distance_switches: int = 1
    kind: VmKind = VmKind.ON_DEMAND

    def __post_init__(self):
        if self.cores < 0:
            raise ValueError("cores must be >= 0")
        if self.memory < 1:
            raise ValueError("memory must be positive")
        if self.distance_switches not in (1, 3, 5):
            raise ValueError("distance must be 1, 3 or 5 switches")
        object.__setattr__(self, "kind", VmKind(self.kind))

    def regions(self, region_size: int) -> int:
        return self.memory // region_size


class RegionStatus(str, Enum):
    ACTIVE = "active"
    MIGRATING = "migrating"
    PAUSED = "paused"
    FAILED = "failed"


@dataclass(frozen=True)
class RegionEntry:
    index: int
    vm_id: str
    physical_region_id: int
    status: RegionStatus = RegionStatus.ACTIVE


@dataclass(frozen=True)
class RegionTable:
    """Maps the cache address space [0, capacity) onto physical regions.

    The table is immutable; every update returns a new table so readers can
    hold a snapshot without locking.
    """

    capacity: int
    entries: tuple[RegionEntry, ...]
    region_size: int = DEFAULT_REGION_SIZE

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.region_size < 1:
            raise ValueError("region_size must be >= 1")
        need = regions_needed(self.capacity, self.region_size)
        if len(self.entries) != need:
            raise ValueError(f"{need} entries needed to cover {self.capacity} bytes, got {len(self.entries)}")
        for i, e in enumerate(self.entries):
            if e.index != i:
                raise ValueError("entries must be indexed contiguously from 0")

    @classmethod
    def build(cls, capacity: int, placements: Iterable[tuple[str, int]], region_size: int = DEFAULT_REGION_SIZE):
        entries = tuple(RegionEntry(i, vm, pr) for i, (vm, pr) in enumerate(placements))
        return cls(capacity, entries, region_size)

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, index: int) -> RegionEntry:
        if not 0 <= index < len(self.entries):
            raise InvalidEntry(f"no entry {index} in a {len(self.entries)}-entry table")
        return self.entries[index]

    def lookup(self, addr: int) -> tuple[str, int, int]:
        return region_lookup(self, addr)

    def split(self, addr: int, length: int) -> list[tuple[int, int, int]]:
        return region_split(self, addr, length)

    def remap(self, index: int, vm_id: str, physical_region_id: int) -> "RegionTable":
        return region_remap(self, index, vm_id, physical_region_id)

    def with_status(self, index: int, status: RegionStatus) -> "RegionTable":
        e = self.entry(index)
        entries = list(self.entries)
        entries[index] = replace(e, status=RegionStatus(status))
        return replace(self, entries=tuple(entries))

    def vms(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.vm_id, None)
        return list(seen)

    def entries_on(self, vm_id: str) -> list[int]:
        return [e.index for e in self.entries if e.vm_id == vm_id]


def regions_needed(capacity: int, region_size: int) -> int:
    return -(-capacity // region_size)


def region_lookup(table: RegionTable, addr: int) -> tuple[str, int, int]:
    """Translate a cache address into (vm_id, physical_region_id, offset)."""
    if not 0 <= addr < table.capacity:
        raise AddressOutOfBounds(f"address {addr} outside [0, {table.capacity})")
    e = table.entries[addr // table.region_size]
    return e.vm_id, e.physical_region_id, addr % table.region_size


def region_split(table: RegionTable, addr: int, length: int) -> list[tuple[int, int, int]]:
    """Cut [addr, addr+length) into per-region (entry_index, offset, sub_len) extents."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if addr < 0 or addr + length > table.capacity:
        raise AddressOutOfBounds(f"range [{addr}, {addr + length}) exceeds capacity {table.capacity}")
    rs = table.region_size
    out = []
    pos, end = addr, addr + length
    while pos < end:
        idx, off = divmod(pos, rs)
        n = min(rs - off, end - pos)
        out.append((idx, off, n))
        pos += n
    return out


def region_remap(table: RegionTable, index: int, vm_id: str, physical_region_id: int) -> RegionTable:
    table.entry(index)
    entries = list(table.entries)
    entries[index] = RegionEntry(index, vm_id, physical_region_id, RegionStatus.ACTIVE)
    return replace(table, entries=tuple(entries))


@dataclass
class CacheDescriptor:
    cache_id: str
    capacity: int
    slo: Slo
    duration: float
    config: RdmaConfig
    vms: list[str] = field(default_factory=list)
    region_size: int = DEFAULT_REGION_SIZE

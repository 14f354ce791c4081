"""A minimal hybrid-log key-value store over a tiered device.

The log tail lives in memory; older segments spill to a tiered device whose
tier 1 (a Redy cache, or an emulated device with cache-like latency) holds a
suffix of what tier 2 (an emulated SSD) holds.  Reads are served from the
lowest tier that has the data.  Timing is modelled on a virtual clock: every
device keeps a set of channels, each IO occupies one for its service time.
"""
from __future__ import annotations

import heapq
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .core import MiB
from .errors import AddressOutOfBounds

SEGMENT_SIZE = 16 * MiB
SSD_LATENCY_US = 100.0
CACHE_LATENCY_US = 5.0
MEMORY_LATENCY_US = 0.1
HEADER = struct.Struct("<HI")             # key_len u16, value_len u32
READ_PREFETCH = 64


def encode_record(key: bytes, value: bytes) -> bytes:
    if not key or len(key) > 0xFFFF:
        raise ValueError("key must be 1..65535 bytes")
    raw = HEADER.pack(len(key), len(value)) + key + value
    return raw + bytes(-len(raw) % 8)


def record_length(key_len: int, value_len: int) -> int:
    n = HEADER.size + key_len + value_len
    return n + (-n % 8)


class EmulatedDevice:
    """Byte store with a per-IO service latency, parallel channels and a bandwidth cap.

    ``capacity`` None means unbounded (grows with the log); otherwise the
    device stores the log suffix ring-style at ``address % capacity``.
    """

    def __init__(self, name: str, latency_us: float, channels: int = 32, bandwidth: float | None = None,
                 capacity: int | None = None):
        self.name = name
        self.latency_us = latency_us
        self.channels = channels
        self.bandwidth = bandwidth            # bytes per second
        self.capacity = capacity
        self.data = bytearray(capacity or 0)
        self._free = [0.0] * channels
        self.ios = 0

    def service(self, now: float, nbytes: int) -> float:
        """Occupy a channel for one IO starting no earlier than ``now``; returns completion time."""
        self.ios += 1
        start = max(now, self._free[0])
        busy = self.latency_us + (nbytes / self.bandwidth * 1e6 if self.bandwidth else 0.0)
        heapq.heapreplace(self._free, start + busy)
        return start + busy

    def reset_clock(self) -> None:
        self._free = [0.0] * self.channels
        self.ios = 0

    def _spans(self, addr: int, n: int):
        if self.capacity is None:
            yield addr, 0, n
            return
        done = 0
        while done < n:
            off = (addr + done) % self.capacity
            k = min(n - done, self.capacity - off)
            yield off, done, k
            done += k

    def store(self, addr: int, data: bytes) -> None:
        if self.capacity is None and addr + len(data) > len(self.data):
            self.data.extend(bytes(addr + len(data) - len(self.data)))
        for off, src, k in self._spans(addr, len(data)):
            self.data[off:off + k] = data[src:src + k]

    def load(self, addr: int, n: int) -> bytes:
        out = bytearray(n)
        for off, dst, k in self._spans(addr, n):
            out[dst:dst + k] = self.data[off:off + k]
        return bytes(out)


class CacheDevice(EmulatedDevice):
    """Tier backed by a Redy cache; bytes live in the cache VMs.

    The service latency is taken from the cache client itself: the mean of a
    few timed reads on the cache's environment clock.
    """

    def __init__(self, client, cache_id: str, channels: int = 32, probes: int = 8):
        cap = client.handle(cache_id).capacity
        super().__init__("cache", 0.0, channels, None, cap)
        self.data = bytearray(0)
        self.client, self.cache_id = client, cache_id
        lats = []
        for i in range(probes):
            t = client.read(cache_id, bytearray(8), (i * 4096) % max(cap - 8, 1), 8)
            client.wait(t)
            lats.append(t.latency)
        self.latency_us = float(np.mean(lats))

    def store(self, addr: int, data: bytes) -> None:
        for off, src, k in self._spans(addr, len(data)):
            self.client.write_sync(self.cache_id, data[src:src + k], off)

    def load(self, addr: int, n: int) -> bytes:
        out = bytearray(n)
        for off, dst, k in self._spans(addr, n):
            out[dst:dst + k] = self.client.read_sync(self.cache_id, off, k)
        return bytes(out)


class TieredDevice:
    """Ordered tiers, each holding a suffix of the log; tier 1 holds the shortest one."""

    def __init__(self, tiers: list[EmulatedDevice], commit_point: int | None = None):
        if not tiers or tiers[-1].capacity is not None:
            raise ValueError("the last tier must be unbounded")
        self.tiers = tiers
        self.commit_point = commit_point or len(tiers)      # 1-based tier index
        if not 1 <= self.commit_point <= len(tiers):
            raise ValueError("commit point outside the tier list")
        self.begin = [0] * len(tiers)
        self.length = 0
        self.cold = [False] * len(tiers)
        self.served = [0] * len(tiers)
        self._lock = threading.Lock()

    def append(self, data: bytes, now: float = 0.0) -> tuple[int, float]:
        """Write ``data`` at the end of every live tier; returns (address, ack time)."""
        if not data:
            raise ValueError("cannot append zero bytes")
        with self._lock:
            addr = self.length
            end = addr + len(data)
            ack = now
            for i, dev in enumerate(self.tiers):
                if self.cold[i]:
                    self.begin[i] = end
                    continue
                try:
                    dev.store(addr, data)
                except Exception:                            # tier-1 loss: continue on the tiers below
                    if i == len(self.tiers) - 1:
                        raise
                    self.mark_cold(i + 1)
                    self.begin[i] = end
                    continue
                if dev.capacity is not None:
                    self.begin[i] = max(self.begin[i], end - dev.capacity)
                done = dev.service(now, len(data))
                if i < self.commit_point:
                    ack = max(ack, done)
            self.length = end
            for i in range(len(self.tiers) - 2, -1, -1):       # keep suffixes nested
                self.begin[i] = max(self.begin[i], self.begin[i + 1])
        return addr, ack

    def mark_cold(self, tier: int) -> None:
        """Tier (1-based) became unavailable; it serves nothing until repaired."""
        self.cold[tier - 1] = True
        self.begin[tier - 1] = self.length

    def repair(self, tier: int) -> None:
        """Bring a tier back empty; it fills again from new appends."""
        self.cold[tier - 1] = False
        self.begin[tier - 1] = self.length

    def tier_for(self, addr: int) -> int:
        """0-based index of the lowest tier holding ``addr``."""
        for i, b in enumerate(self.begin):
            if addr >= b and not self.cold[i]:
                return i
        return len(self.tiers) - 1

    def read(self, addr: int, n: int, now: float = 0.0) -> tuple[bytes, float]:
        if n < 1 or addr < 0 or addr + n > self.length:
            raise AddressOutOfBounds(f"[{addr}, {addr + n}) beyond device length {self.length}")
        out = bytearray()
        done = now
        pos, end = addr, addr + n
        while pos < end:
            i = self.tier_for(pos)
            # the part stops where a lower tier starts holding the data
            stop = end
            for j in range(i):
                if not self.cold[j] and pos < self.begin[j] < stop:
                    stop = self.begin[j]
            dev = self.tiers[i]
            out += dev.load(pos, stop - pos)
            done = max(done, dev.service(now, stop - pos))
            self.served[i] += 1
            pos = stop
        return bytes(out), done

    def reset_clock(self) -> None:
        for d in self.tiers:
            d.reset_clock()
        self.served = [0] * len(self.tiers)


class HybridLog:
    """Log whose addresses >= head_address live in memory and the rest on the device."""

    def __init__(self, device: TieredDevice, memory_budget: int, segment_size: int = SEGMENT_SIZE,
                 memory_latency_us: float = MEMORY_LATENCY_US):
        if memory_budget < segment_size:
            raise ValueError("memory budget must hold at least one segment")
        self.device = device
        self.memory_budget = memory_budget
        self.segment_size = segment_size
        self.memory_latency_us = memory_latency_us
        self.head_address = 0
        self.tail_address = 0
        self.buffer = bytearray()             # bytes [head_address, tail_address)
        self.spills = 0

    def append(self, data: bytes, now: float = 0.0) -> tuple[int, float]:
        addr = self.tail_address
        self.buffer += data
        self.tail_address += len(data)
        done = now
        while self.tail_address - self.head_address > self.memory_budget:
            t = self.spill_oldest_segment(now)
            if t is None:
                break
            done = max(done, t)
        return addr, done

    def spill_oldest_segment(self, now: float = 0.0) -> float | None:
        """Move the oldest full read-only segment to the device; None when there is none."""
        seg = self.segment_size
        tail_segment = self.tail_address // seg * seg
        if self.head_address + seg > tail_segment:
            return None
        chunk = bytes(self.buffer[:seg])
        _, ack = self.device.append(chunk, now)
        del self.buffer[:seg]
        self.head_address += seg
        self.spills += 1
        return ack

    def read(self, addr: int, n: int, now: float = 0.0) -> tuple[bytes, float]:
        if n < 1 or addr < 0 or addr + n > self.tail_address:
            raise AddressOutOfBounds(f"[{addr}, {addr + n}) beyond log tail {self.tail_address}")
        head = self.head_address
        if addr >= head:
            return bytes(self.buffer[addr - head:addr - head + n]), now + self.memory_latency_us
        dev_n = min(n, head - addr)
        data, done = self.device.read(addr, dev_n, now)
        if dev_n < n:
            data += bytes(self.buffer[:n - dev_n])
        return data, done


@dataclass
class HashIndex:
    entries: dict[bytes, int] = field(default_factory=dict)

    def get(self, key: bytes) -> int | None:
        return self.entries.get(key)

    def put(self, key: bytes, addr: int) -> None:
        self.entries[key] = addr

    def __len__(self) -> int:
        return len(self.entries)


class KvStore:
    """Append-only upserts, index lookups, reads from memory or the tiered device."""

    def __init__(self, log: HybridLog):
        self.log = log
        self.index = HashIndex()

    def upsert(self, key: bytes, value: bytes, now: float = 0.0) -> float:
        addr, done = self.log.append(encode_record(key, value), now)
        self.index.put(key, addr)
        return done

    def read(self, key: bytes, now: float = 0.0) -> tuple[bytes | None, float]:
        addr = self.index.get(key)
        if addr is None:
            return None, now
        want = min(HEADER.size + len(key) + READ_PREFETCH, self.log.tail_address - addr)
        data, done = self.log.read(addr, want, now)
        klen, vlen = HEADER.unpack_from(data)
        total = HEADER.size + klen + vlen
        if total > len(data):
            data, done = self.log.read(addr, total, done)
        stored = data[HEADER.size:HEADER.size + klen]
        if stored != key:
            raise RuntimeError("index points at a record for another key")
        return data[HEADER.size + klen:total], done


# -- benchmark ----------------------------------------------------------------------------------------

def build_store(cache_size: int, memory_budget: int, segment_size: int = SEGMENT_SIZE,
                ssd_latency_us: float = SSD_LATENCY_US, cache_latency_us: float = CACHE_LATENCY_US,
                ssd_channels: int = 32, ssd_bandwidth: float | None = 2e9, commit_point: int | None = None,
                cache_device: EmulatedDevice | None = None) -> KvStore:
    ssd = EmulatedDevice("ssd", ssd_latency_us, ssd_channels, ssd_bandwidth)
    tiers = [ssd]
    if cache_device is not None:
        tiers.insert(0, cache_device)
    elif cache_size > 0:
        tiers.insert(0, EmulatedDevice("cache", cache_latency_us, 64, None, cache_size))
    return KvStore(HybridLog(TieredDevice(tiers, commit_point), memory_budget, segment_size))


def bench_tieredkv(spec, backend: str = "sim", duration_s: float = 0.05, interval_s: float | None = None,
                   ops: int | None = None, cache_size: int = 8 * MiB, memory_budget: int = MiB,
                   segment_size: int = 16 * 1024, ssd_latency_us: float = SSD_LATENCY_US,
                   cache_latency_us: float = CACHE_LATENCY_US, ssd_channels: int = 32, use_redy: bool = False):
    """Load ``spec.record_count`` records, then run the op mix on ``spec.threads`` closed-loop threads.

    Returns CSV rows (see ``bench.BENCH_COLUMNS``) on the virtual clock.
    """
    from .bench import interval_rows
    from .workload import OpStream
    cache_dev = None
    env = None
    if use_redy and cache_size > 0:
        from .bench import LATENCY_SLO, make_env
        from .client import RedyClient
        env = make_env(backend, seed=spec.seed)
        cl = RedyClient(env, region_size=max(MiB, min(cache_size, 64 * MiB)))
        cache_dev = CacheDevice(cl, cl.create(cache_size, LATENCY_SLO))
    try:
        store = build_store(cache_size, memory_budget, segment_size, ssd_latency_us, cache_latency_us,
                            ssd_channels, cache_device=cache_dev)
        keys = [i.to_bytes(spec.key_size, "little") for i in range(spec.record_count)]
        value = bytes(spec.value_size)
        for k in keys:
            store.upsert(k, value)
        store.log.device.reset_clock()
        if ops == 0:
            return []
        end_us = duration_s * 1e6
        streams = [OpStream(spec, t) for t in range(spec.threads)]
        clock = [(0.0, t) for t in range(spec.threads)]
        heapq.heapify(clock)
        lat = []
        issued = 0
        while clock:
            now, t = heapq.heappop(clock)
            if now >= end_us or (ops is not None and issued >= ops):
                continue
            is_read, key = streams[t].next()
            issued += 1
            if is_read:
                _, done = store.read(keys[key], now)
            else:
                done = store.upsert(keys[key], value, now)
            lat.append((done, done - now, is_read))
            heapq.heappush(clock, (done, t))
        interval_us = (interval_s or duration_s) * 1e6
        return interval_rows(lat, 0.0, end_us, interval_us, spec.threads, "tieredkv", backend)
    finally:
        if env is not None:
            env.close()

"""Cache server agent: region allocation, batch execution and migration reads."""
from __future__ import annotations

import hashlib
import itertools
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator

from .core import DEFAULT_REGION_SIZE, RdmaConfig
from .errors import AccessDenied, AllocationFailed, InvalidOperation, MigrationAborted
from .transport.wire import Op, Request, RequestBatch, Response, ResponseBatch, Status

log = logging.getLogger(__name__)

PAGE_SIZE = 512
ZERO_PAGE = bytes(PAGE_SIZE)


class PhysicalRegion:
    """A zero-initialised region stored sparsely in fixed-size pages."""

    def __init__(self, region_id: int, size: int, token: int):
        self.region_id = region_id
        self.size = size
        self.token = token
        self.pages: dict[int, bytearray] = {}
        self.lock = threading.Lock()

    def in_bounds(self, offset: int, length: int) -> bool:
        return offset >= 0 and length >= 1 and offset + length <= self.size

    def read(self, offset: int, length: int) -> bytes:
        with self.lock:
            return self._read(offset, length)

    def _read(self, offset: int, length: int) -> bytes:
        out = bytearray(length)
        pos, end = offset, offset + length
        pages = self.pages
        while pos < end:
            pno, poff = divmod(pos, PAGE_SIZE)
            n = min(PAGE_SIZE - poff, end - pos)
            page = pages.get(pno)
            if page is not None:
                out[pos - offset:pos - offset + n] = page[poff:poff + n]
            pos += n
        return bytes(out)

    def write(self, offset: int, data: bytes) -> None:
        with self.lock:
            self._write(offset, data)

    def _write(self, offset: int, data: bytes) -> None:
        pos, end = offset, offset + len(data)
        pages = self.pages
        while pos < end:
            pno, poff = divmod(pos, PAGE_SIZE)
            n = min(PAGE_SIZE - poff, end - pos)
            page = pages.get(pno)
            if page is None:
                page = pages[pno] = bytearray(PAGE_SIZE)
            page[poff:poff + n] = data[pos - offset:pos - offset + n]
            pos += n

    def populated(self) -> list[int]:
        """Page numbers holding any non-zero byte."""
        with self.lock:
            return sorted(p for p, page in self.pages.items() if page != ZERO_PAGE)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for pno in self.populated():
            h.update(pno.to_bytes(8, "little"))
            h.update(bytes(self.pages[pno]))
        return h.hexdigest()

    def snapshot_pages(self) -> dict[int, bytes]:
        with self.lock:
            return {p: bytes(page) for p, page in self.pages.items() if page != ZERO_PAGE}

    def load_pages(self, pages: dict[int, bytes]) -> None:
        with self.lock:
            self.pages = {p: bytearray(b) for p, b in pages.items()}


class ServerMode(str, Enum):
    SERVING = "serving"
    DRAINING = "draining"
    TERMINATED = "terminated"


@dataclass
class ConnectionGrant:
    connection_id: int
    config: RdmaConfig
    regions: set[int] = field(default_factory=set)
    last_batch_id: int = -1


class CacheServer:
    """Agent running on one VM.  Holds regions and executes requests against them."""

    def __init__(self, server_id: str, memory: int, region_size: int = DEFAULT_REGION_SIZE,
                 server_threads: int = 1):
        if region_size < 1 or memory < region_size:
            raise ValueError("server memory must hold at least one region")
        self.server_id = server_id
        self.memory = memory
        self.region_size = region_size
        self.server_threads = server_threads
        self.regions: dict[int, PhysicalRegion] = {}
        self.connections: dict[int, ConnectionGrant] = {}
        self.mode = ServerMode.SERVING
        self.executed_batches: list[tuple[int, int]] = []   # (connection_id, batch_id)
        self.cpu_requests = 0
        self.on_terminate: list[Callable[[CacheServer], None]] = []
        self._by_token: dict[int, PhysicalRegion] = {}
        self._ids = itertools.count()
        self._conn_ids = itertools.count(1)
        self._lock = threading.RLock()

    # -- accounting -------------------------------------------------------
    @property
    def total_regions(self) -> int:
        return self.memory // self.region_size

    @property
    def free_regions(self) -> int:
        return self.total_regions - len(self.regions)

    def _token(self, region_id: int) -> int:
        digest = hashlib.blake2b(f"{self.server_id}/{region_id}".encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little") or 1

    def allocate_regions(self, count: int) -> list[tuple[int, int]]:
        with self._lock:
            if self.mode is not ServerMode.SERVING:
                raise AllocationFailed(f"server {self.server_id} is {self.mode.value}")
            if count < 1:
                raise AllocationFailed("region count must be >= 1")
            if count > self.free_regions:
                raise AllocationFailed(f"{count} regions requested, {self.free_regions} free on {self.server_id}")
            grants = []
            for _ in range(count):
                rid = next(self._ids)
                region = PhysicalRegion(rid, self.region_size, self._token(rid))
                self.regions[rid] = region
                self._by_token[region.token] = region
                grants.append((rid, region.token))
            return grants

    def release_regions(self, region_ids) -> None:
        with self._lock:
            for rid in region_ids:
                region = self.regions.pop(rid, None)
                if region is not None:
                    self._by_token.pop(region.token, None)
                    for conn in self.connections.values():
                        conn.regions.discard(rid)

    # -- connect ----------------------------------------------------------
    def handle_connect(self, region_count: int, config: RdmaConfig,
                       existing: list[int] | None = None) -> tuple[int, list[tuple[int, int]]]:
        """Allocate ``region_count`` fresh regions for a new connection.

        ``existing`` grants the connection access to regions already allocated
        here (a second client thread of the same cache).
        """
        with self._lock:
            grants = self.allocate_regions(region_count) if region_count else []
            cid = next(self._conn_ids)
            conn = ConnectionGrant(cid, config, {r for r, _ in grants})
            for rid in existing or ():
                if rid not in self.regions:
                    raise AccessDenied(f"region {rid} unknown on {self.server_id}")
                conn.regions.add(rid)
                grants.append((rid, self.regions[rid].token))
            self.connections[cid] = conn
            return cid, grants

    def grant(self, connection_id: int, region_ids) -> list[tuple[int, int]]:
        with self._lock:
            conn = self.connections[connection_id]
            out = []
            for rid in region_ids:
                conn.regions.add(rid)
                out.append((rid, self.regions[rid].token))
            return out

    def close_connection(self, connection_id: int) -> None:
        with self._lock:
            self.connections.pop(connection_id, None)

    # -- data path ----------------------------------------------------------
    def _apply(self, req: Request, region: PhysicalRegion | None) -> Response:
        if region is None:
            return Response(Status.ACCESS_DENIED)
        if not region.in_bounds(req.offset, req.length):
            return Response(Status.OUT_OF_BOUNDS)
        if req.op is Op.WRITE:
            region.write(req.offset, req.payload)
            return Response(Status.OK)
        return Response(Status.OK, region.read(req.offset, req.length))

    def execute_batch(self, batch: RequestBatch, connection_id: int | None = None) -> ResponseBatch:
        """Apply requests in order, each atomically; responses follow request order."""
        if self.mode is ServerMode.TERMINATED:
            raise MigrationAborted(f"server {self.server_id} terminated")
        conn = self.connections.get(connection_id) if connection_id is not None else None
        if conn is not None:
            if batch.batch_id <= conn.last_batch_id:
                raise InvalidOperation(f"batch {batch.batch_id} replayed on connection {connection_id}")
            conn.last_batch_id = batch.batch_id
            if conn.config.s == 0 and len(batch.requests) > 1:
                raise InvalidOperation("connection without server threads accepts one-sided transfers only")
            self.executed_batches.append((connection_id, batch.batch_id))
        if not batch.one_sided:
            self.cpu_requests += len(batch.requests)
        out = []
        for req in batch.requests:
            if conn is not None and req.region_id not in conn.regions:
                out.append(Response(Status.ACCESS_DENIED))
                continue
            out.append(self._apply(req, self.regions.get(req.region_id)))
        return ResponseBatch(batch.batch_id, out)

    def execute_one_sided(self, req: Request, token: int, connection_id: int | None = None,
                          batch_id: int | None = None) -> Response:
        """NIC-side access by token; no server thread is involved."""
        if self.mode is ServerMode.TERMINATED:
            raise MigrationAborted(f"server {self.server_id} terminated")
        if connection_id is not None:
            self.executed_batches.append((connection_id, batch_id))
        region = self._by_token.get(token)
        if region is None or region.region_id != req.region_id:
            return Response(Status.ACCESS_DENIED)
        return self._apply(req, region)

    # -- migration ------------------------------------------------------------
    def start_draining(self) -> None:
        if self.mode is ServerMode.SERVING:
            self.mode = ServerMode.DRAINING

    def migration_read(self, token: int, offset: int, length: int) -> bytes:
        if self.mode is ServerMode.TERMINATED:
            raise MigrationAborted(f"source {self.server_id} terminated")
        region = self._by_token.get(token)
        if region is None:
            raise AccessDenied("invalid token")
        if not region.in_bounds(offset, length):
            raise AccessDenied("migration read out of bounds")
        return region.read(offset, length)

    def serve_migration_reads(self, token: int, chunk: int = 1 << 20) -> Iterator[tuple[int, bytes]]:
        """Yield (offset, bytes) for every populated chunk of the region behind ``token``."""
        region = self._by_token.get(token)
        if region is None:
            raise AccessDenied("invalid token")
        chunk = max(PAGE_SIZE, chunk - chunk % PAGE_SIZE)
        offsets = sorted({p * PAGE_SIZE // chunk * chunk for p in region.populated()})
        for off in offsets:
            n = min(chunk, region.size - off)
            yield off, self.migration_read(token, off, n)

    def ingest(self, region_id: int, offset: int, data: bytes) -> None:
        self.regions[region_id].write(offset, data)

    def terminate(self) -> None:
        with self._lock:
            if self.mode is ServerMode.TERMINATED:
                return
            self.mode = ServerMode.TERMINATED
        for cb in list(self.on_terminate):
            cb(self)


def copy_region(source: CacheServer, token: int, dest: CacheServer, dest_region_id: int,
                chunk: int = 1 << 20) -> int:
    """Pull a region with one-sided reads; returns bytes moved."""
    moved = 0
    for off, data in source.serve_migration_reads(token, chunk):
        dest.ingest(dest_region_id, off, data)
        moved += len(data)
    return moved

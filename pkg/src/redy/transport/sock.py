"""Loopback TCP backend speaking the framed wire format.

It exists to exercise real thread interleavings; it makes no attempt at
performance fidelity.
"""
from __future__ import annotations

import collections
import logging
import socket
import struct
import threading
from typing import Callable

from ..core import RdmaConfig
from ..errors import AccessDenied, AllocationFailed, ConnectionFailed, ConnectionLost, MigrationAborted
from ..server import CacheServer
from . import wire
from .wire import MsgType, Op, Request, RequestBatch, Response, ResponseBatch, Status

log = logging.getLogger(__name__)


def _encode_connect(region_count: int, config: RdmaConfig, attach: list[int]) -> bytes:
    body = wire.encode_connect(region_count, config.c, config.s, config.b, config.q)
    return body + struct.pack("<H", len(attach)) + b"".join(struct.pack("<I", r) for r in attach)


def _decode_connect(body: bytes) -> tuple[int, RdmaConfig, list[int]]:
    n = wire.CONNECT.size
    region_count, c, s, b, q = wire.decode_connect(body[:n])
    attach: list[int] = []
    if len(body) > n:
        (k,) = struct.unpack_from("<H", body, n)
        attach = [struct.unpack_from("<I", body, n + 2 + 4 * i)[0] for i in range(k)]
    return region_count, RdmaConfig(c, s, b, q), attach


class SocketServerEndpoint:
    """Serves one :class:`CacheServer` on a listening socket, one thread per connection."""

    def __init__(self, server: CacheServer, host: str = "127.0.0.1", port: int = 0):
        self.server = server
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()[:2]
        self._threads = threading.BoundedSemaphore(max(server.server_threads, 1))
        self._conns: list[socket.socket] = []
        self._stopped = threading.Event()
        self._acceptor = threading.Thread(target=self._accept_loop, name=f"accept-{server.server_id}", daemon=True)
        self._acceptor.start()
        server.on_terminate.append(lambda _s: self.stop())

    def _accept_loop(self):
        while not self._stopped.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket):
        cid = None
        try:
            while True:
                msg = wire.recv_frame(conn)
                if msg is None:
                    return
                kind, body = msg
                if kind is MsgType.CONNECT:
                    region_count, config, attach = _decode_connect(body)
                    try:
                        cid, grants = self.server.handle_connect(region_count, config, attach)
                    except (AllocationFailed, AccessDenied):
                        grants = []
                    wire.send_frame(conn, MsgType.CONNECT_ACK, wire.encode_connect_ack(grants))
                elif kind is MsgType.REQUEST_BATCH:
                    batch = wire.decode_request_batch(body)
                    if len(batch.requests) == 1:
                        # memory agent path: no server thread involved
                        batch.one_sided = True
                        resp = self.server.execute_batch(batch, cid)
                    else:
                        with self._threads:
                            resp = self.server.execute_batch(batch, cid)
                    wire.send_frame(conn, MsgType.RESPONSE_BATCH, wire.encode_response_batch(resp))
                elif kind is MsgType.MIGRATION_READ:
                    token, offset, length = wire.decode_migration_read(body)
                    try:
                        r = Response(Status.OK, self.server.migration_read(token, offset, length))
                    except AccessDenied:
                        r = Response(Status.ACCESS_DENIED)
                    wire.send_frame(conn, MsgType.RESPONSE_BATCH, wire.encode_response_batch(ResponseBatch(0, [r])))
                elif kind is MsgType.TERMINATE:
                    self.server.terminate()
                    return
        except (OSError, wire.WireError, MigrationAborted) as exc:
            log.debug("connection on %s closed: %s", self.server.server_id, exc)
        finally:
            if cid is not None:
                self.server.close_connection(cid)
            try:
                conn.close()
            except OSError:
                pass

    def stop(self):
        if self._stopped.is_set():
            return
        self._stopped.set()
        try:
            self._sock.close()
        except OSError:
            pass
        for c in self._conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class SocketQueuePair:
    def __init__(self, sock: socket.socket, config: RdmaConfig, grants: list[tuple[int, int]]):
        self._sock = sock
        self.config = config
        self.tokens = dict(grants)
        self.queue_depth_limit = config.q
        self.in_flight = 0
        self.closed = False
        self.failed = False
        self.on_completion: Callable[[SocketQueuePair], None] | None = None
        self._next_batch_id = 1
        self._pending: collections.OrderedDict[int, RequestBatch] = collections.OrderedDict()
        self._done: collections.deque[ResponseBatch] = collections.deque()
        self._lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    @classmethod
    def connect(cls, address, config: RdmaConfig, region_count: int, attach: list[int] | None = None,
                timeout: float = 5.0) -> tuple["SocketQueuePair", list[tuple[int, int]]]:
        if region_count < 1 and not attach:
            raise ValueError("region_count must be >= 1")
        try:
            sock = socket.create_connection(tuple(address), timeout=timeout)
        except OSError as exc:
            raise ConnectionFailed(f"cannot reach {address}: {exc}") from None
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        wire.send_frame(sock, MsgType.CONNECT, _encode_connect(region_count, config, list(attach or [])))
        msg = wire.recv_frame(sock)
        if msg is None or msg[0] is not MsgType.CONNECT_ACK:
            sock.close()
            raise ConnectionFailed(f"no ConnectAck from {address}")
        grants = wire.decode_connect_ack(msg[1])
        if not grants:
            sock.close()
            raise AllocationFailed(f"server at {address} could not allocate {region_count} regions")
        return cls(sock, config, grants), grants

    def post_batch(self, batch: RequestBatch) -> bool:
        if self.closed or self.failed:
            raise ConnectionLost("connection is down")
        if not 1 <= len(batch.requests) <= self.config.b:
            raise ValueError(f"batch of {len(batch.requests)} requests exceeds b={self.config.b}")
        with self._lock:
            if self.in_flight >= self.queue_depth_limit:
                return False
            batch.batch_id = self._next_batch_id
            self._next_batch_id += 1
            batch.one_sided = len(batch.requests) == 1
            self._pending[batch.batch_id] = batch
            self.in_flight += 1
            try:
                wire.send_frame(self._sock, MsgType.REQUEST_BATCH, wire.encode_request_batch(batch))
            except OSError:
                self._fail()
                raise ConnectionLost("send failed") from None
        return True

    def one_sided_transfer(self, op: Op, token: int, region_id: int, offset: int, length: int,
                           payload: bytes = b"") -> int | None:
        if self.tokens.get(region_id) != token:
            raise AccessDenied("invalid token")
        batch = RequestBatch(0, [Request(op, region_id, offset, length, payload)], one_sided=True, token=token)
        return batch.batch_id if self.post_batch(batch) else None

    def _read_loop(self):
        try:
            while True:
                msg = wire.recv_frame(self._sock)
                if msg is None:
                    break
                kind, body = msg
                if kind is not MsgType.RESPONSE_BATCH:
                    continue
                with self._lock:
                    if not self._pending:
                        continue
                    bid = next(iter(self._pending))
                    batch = self._pending.pop(bid)
                    resp = wire.decode_response_batch(body, batch.requests)
                    self._done.append(resp)
                if self.on_completion:
                    self.on_completion(self)
        except (OSError, wire.WireError):
            pass
        self._fail()

    def _fail(self):
        with self._lock:
            if self.closed and not self._pending:
                return
            self.failed = True
            while self._pending:
                bid, batch = self._pending.popitem(last=False)
                self._done.append(ResponseBatch(bid, [Response(Status.FAILED) for _ in batch.requests], failed=True))
        if self.on_completion:
            self.on_completion(self)

    def poll(self) -> list[ResponseBatch]:
        out = []
        with self._lock:
            while self._done:
                out.append(self._done.popleft())
                self.in_flight -= 1
        return out

    def close(self):
        self.closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class SocketMigrationSource:
    """Pulls region bytes from a remote server with MigrationRead frames."""

    def __init__(self, address, token: int):
        self.token = token
        try:
            self._sock = socket.create_connection(tuple(address), timeout=5.0)
        except OSError as exc:
            raise MigrationAborted(f"source unreachable: {exc}") from None
        self._sock.settimeout(None)

    def read(self, offset: int, length: int) -> bytes:
        try:
            wire.send_frame(self._sock, MsgType.MIGRATION_READ, wire.encode_migration_read(self.token, offset, length))
            msg = wire.recv_frame(self._sock)
        except OSError:
            msg = None
        if msg is None:
            raise MigrationAborted("source terminated mid-stream")
        resp = wire.decode_response_batch(msg[1], [Request(Op.READ, 0, offset, length)])
        if not resp.responses[0].ok:
            raise AccessDenied("migration read rejected")
        return resp.responses[0].payload

    def close(self):
        self._sock.close()


def send_terminate(address) -> None:
    try:
        with socket.create_connection(tuple(address), timeout=2.0) as s:
            wire.send_frame(s, MsgType.TERMINATE, b"")
    except OSError:
        pass

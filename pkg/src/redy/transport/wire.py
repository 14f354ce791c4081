"""Batch types and the little-endian binary frame codec used by the socket backend."""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAGIC = 0x52455459
VERSION = 1

HEADER = struct.Struct("<IBBI")
BATCH_HEAD = struct.Struct("<QH")
REQ_HEAD = struct.Struct("<BIQI")
CONNECT = struct.Struct("<HHHHH")
ACK_ENTRY = struct.Struct("<IQ")
MIGRATION_READ = struct.Struct("<QQI")


class MsgType(IntEnum):
    CONNECT = 1
    CONNECT_ACK = 2
    REQUEST_BATCH = 3
    RESPONSE_BATCH = 4
    MIGRATION_READ = 5
    TERMINATE = 6
    # control-plane extension for the manager RPC surface; JSON bodies
    MANAGER_REQUEST = 16
    MANAGER_REPLY = 17


class Op(IntEnum):
    READ = 0
    WRITE = 1


class Status(IntEnum):
    OK = 0
    OUT_OF_BOUNDS = 1
    ACCESS_DENIED = 2
    # never on the wire: produced locally when a connection dies
    FAILED = 255


class WireError(ValueError):
    pass


@dataclass
class Request:
    op: Op
    region_id: int
    offset: int
    length: int
    payload: bytes = b""
    tag: object = None

    def __post_init__(self):
        self.op = Op(self.op)
        if self.length < 1:
            raise ValueError("request length must be >= 1")
        if self.op is Op.WRITE and len(self.payload) != self.length:
            raise ValueError("write payload length must equal len")
        if self.op is Op.READ and self.payload:
            raise ValueError("reads carry no payload")

    @property
    def wire_size(self) -> int:
        return REQ_HEAD.size + len(self.payload)


@dataclass
class Response:
    status: Status
    payload: bytes = b""

    @property
    def ok(self) -> bool:
        return self.status == Status.OK


@dataclass
class RequestBatch:
    batch_id: int
    requests: list[Request] = field(default_factory=list)
    one_sided: bool = False
    token: int | None = None

    def __len__(self):
        return len(self.requests)

    @property
    def wire_size(self) -> int:
        return BATCH_HEAD.size + sum(r.wire_size for r in self.requests)

    @property
    def response_size(self) -> int:
        return BATCH_HEAD.size + sum(1 + (r.length if r.op is Op.READ else 0) for r in self.requests)


@dataclass
class ResponseBatch:
    batch_id: int
    responses: list[Response] = field(default_factory=list)
    failed: bool = False

    def __len__(self):
        return len(self.responses)


def frame(msg_type: int, body: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(msg_type), len(body)) + body


def parse_header(data: bytes) -> tuple[MsgType, int]:
    magic, version, msg_type, body_len = HEADER.unpack(data)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic:#x}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    return MsgType(msg_type), body_len


def encode_request_batch(batch: RequestBatch) -> bytes:
    parts = [BATCH_HEAD.pack(batch.batch_id, len(batch.requests))]
    for r in batch.requests:
        parts.append(REQ_HEAD.pack(int(r.op), r.region_id, r.offset, r.length))
        if r.op is Op.WRITE:
            parts.append(bytes(r.payload))
    return b"".join(parts)


def decode_request_batch(body: bytes) -> RequestBatch:
    mv = memoryview(body)
    try:
        batch_id, count = BATCH_HEAD.unpack_from(mv, 0)
        pos = BATCH_HEAD.size
        reqs = []
        for _ in range(count):
            op, region_id, offset, length = REQ_HEAD.unpack_from(mv, pos)
            pos += REQ_HEAD.size
            payload = b""
            if op == Op.WRITE:
                if pos + length > len(mv):
                    raise WireError("truncated write payload")
                payload = bytes(mv[pos:pos + length])
                pos += length
            reqs.append(Request(Op(op), region_id, offset, length, payload))
    except struct.error as exc:
        raise WireError(f"truncated request batch: {exc}") from None
    if pos != len(mv):
        raise WireError("trailing bytes after request batch")
    return RequestBatch(batch_id, reqs)


def encode_response_batch(batch: ResponseBatch) -> bytes:
    parts = [BATCH_HEAD.pack(batch.batch_id, len(batch.responses))]
    for r in batch.responses:
        parts.append(bytes((int(r.status),)))
        parts.append(bytes(r.payload))
    return b"".join(parts)


def decode_response_batch(body: bytes, requests: list[Request]) -> ResponseBatch:
    """Decode a response batch; read payload lengths come from the matching requests."""
    mv = memoryview(body)
    try:
        batch_id, count = BATCH_HEAD.unpack_from(mv, 0)
    except struct.error:
        raise WireError("truncated response batch") from None
    if count != len(requests):
        raise WireError(f"response count {count} does not match {len(requests)} requests")
    pos = BATCH_HEAD.size
    out = []
    for req in requests:
        if pos >= len(mv):
            raise WireError("truncated response batch")
        status = Status(mv[pos])
        pos += 1
        payload = b""
        if status == Status.OK and req.op is Op.READ:
            if pos + req.length > len(mv):
                raise WireError("truncated read payload")
            payload = bytes(mv[pos:pos + req.length])
            pos += req.length
        out.append(Response(status, payload))
    if pos != len(mv):
        raise WireError("trailing bytes after response batch")
    return ResponseBatch(batch_id, out)


def encode_connect(region_count: int, c: int, s: int, b: int, q: int) -> bytes:
    return CONNECT.pack(region_count, c, s, b, q)


def decode_connect(body: bytes) -> tuple[int, int, int, int, int]:
    return CONNECT.unpack(body)


def encode_connect_ack(grants: list[tuple[int, int]]) -> bytes:
    return struct.pack("<H", len(grants)) + b"".join(ACK_ENTRY.pack(r, t) for r, t in grants)


def decode_connect_ack(body: bytes) -> list[tuple[int, int]]:
    (n,) = struct.unpack_from("<H", body, 0)
    if len(body) != 2 + n * ACK_ENTRY.size:
        raise WireError("malformed ConnectAck")
    return [ACK_ENTRY.unpack_from(body, 2 + i * ACK_ENTRY.size) for i in range(n)]


def encode_migration_read(token: int, offset: int, length: int) -> bytes:
    return MIGRATION_READ.pack(token, offset, length)


def decode_migration_read(body: bytes) -> tuple[int, int, int]:
    return MIGRATION_READ.unpack(body)


def recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, msg_type: int, body: bytes) -> None:
    sock.sendall(frame(msg_type, body))


def recv_frame(sock: socket.socket) -> tuple[MsgType, bytes] | None:
    head = recv_exact(sock, HEADER.size)
    if head is None:
        return None
    msg_type, body_len = parse_header(head)
    body = recv_exact(sock, body_len) if body_len else b""
    if body is None:
        return None
    return msg_type, body

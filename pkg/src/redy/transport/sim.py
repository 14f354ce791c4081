"""Deterministic discrete-event backend.

A single :class:`Simulator` owns the virtual clock (microseconds).  The
:class:`SimFabric` turns every posted batch into a chain of FIFO resource
reservations (client cpu, client NIC, propagation, server thread or NIC DMA,
server NIC, propagation) and schedules the server-side execution and the
client-side completion as events.
"""
from __future__ import annotations

import heapq
import itertools
import random
from typing import TYPE_CHECKING, Callable

from ..core import RdmaConfig
from ..errors import ConnectionFailed, ConnectionLost
from .netmodel import NetworkModel
from .wire import Op, Request, RequestBatch, Response, ResponseBatch, Status

if TYPE_CHECKING:
    from ..server import CacheServer


class Simulator:
    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()

    def at(self, when: float, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (max(when, self.now), next(self._seq), fn, args))

    def after(self, delay: float, fn: Callable, *args) -> None:
        self.at(self.now + delay, fn, *args)

    def pending(self) -> int:
        return len(self._heap)

    def peek(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        if not self._heap:
            return False
        when, _, fn, args = heapq.heappop(self._heap)
        self.now = when
        fn(*args)
        return True

    def run(self, until: float | None = None) -> None:
        while self._heap and (until is None or self._heap[0][0] <= until):
            self.step()
        if until is not None and until > self.now:
            self.now = until

    def run_until(self, predicate: Callable[[], bool], limit: float | None = None) -> bool:
        while not predicate():
            if not self._heap or (limit is not None and self._heap[0][0] > limit):
                return predicate()
            self.step()
        return True


class SimQueuePair:
    """One reliable, ordered connection between a client thread and a server."""

    def __init__(self, fabric: "SimFabric", server: CacheServer | None, connection_id: int,
                 config: RdmaConfig, distance: int, client_key, grants: list[tuple[int, int]], index: int,
                 server_key=None):
        self.fabric = fabric
        self.server = server
        self.connection_id = connection_id
        self.config = config
        self.distance = distance
        self.client_key = client_key
        self.tokens = dict(grants)
        self.index = index
        self.server_key = server_key if server_key is not None else id(server)
        self.queue_depth_limit = config.q
        self.in_flight = 0
        self.closed = False
        self.failed = False
        self.on_completion: Callable[[SimQueuePair], None] | None = None
        self._next_batch_id = 1
        self._next_poll_id = 1
        self._done: dict[int, ResponseBatch] = {}
        self._pending: dict[int, RequestBatch] = {}
        self._last_exec = 0.0
        self._last_done = 0.0

    # -- posting ---------------------------------------------------------------
    def post_batch(self, batch: RequestBatch) -> bool:
        """Queue a batch for transfer; ``False`` means backpressure (retry later)."""
        if self.closed or self.failed:
            raise ConnectionLost(f"connection {self.connection_id} is down")
        if not 1 <= len(batch.requests) <= self.config.b:
            raise ValueError(f"batch of {len(batch.requests)} requests exceeds b={self.config.b}")
        if self.in_flight >= self.queue_depth_limit:
            return False
        if len(batch.requests) == 1 and not batch.one_sided:
            batch.one_sided = True
            batch.token = self.tokens.get(batch.requests[0].region_id, 0)
        batch.batch_id = self._next_batch_id
        self._next_batch_id += 1
        self.in_flight += 1
        self._pending[batch.batch_id] = batch
        self.fabric._launch(self, batch)
        return True

    def one_sided_transfer(self, op: Op, token: int, region_id: int, offset: int, length: int,
                           payload: bytes = b"") -> int | None:
        batch = RequestBatch(0, [Request(op, region_id, offset, length, payload)], one_sided=True, token=token)
        return batch.batch_id if self.post_batch(batch) else None

    def poll(self) -> list[ResponseBatch]:
        out = []
        while self._next_poll_id in self._done:
            out.append(self._done.pop(self._next_poll_id))
            self._pending.pop(self._next_poll_id, None)
            self._next_poll_id += 1
            self.in_flight -= 1
        return out

    def close(self) -> None:
        self.closed = True
        if self.server is not None:
            self.server.close_connection(self.connection_id)

    # -- fabric callbacks ----------------------------------------------------------
    def _fail_pending(self) -> None:
        self.failed = True
        for bid, batch in sorted(self._pending.items()):
            if bid not in self._done:
                self._done[bid] = ResponseBatch(bid, [Response(Status.FAILED) for _ in batch.requests], failed=True)
        if self.on_completion:
            self.on_completion(self)


class SimFabric:
    def __init__(self, sim: Simulator, model: NetworkModel | None = None):
        self.sim = sim
        self.model = model or NetworkModel()
        self.rng = random.Random(self.model.seed)
        self._free: dict = {}
        self.log: list[tuple] = []
        self.qps: list[SimQueuePair] = []
        self._conn_ids = itertools.count(1)
        self._watched: set[int] = set()

    def _jit(self, x: float) -> float:
        if self.model.noise and x:
            return x * (1.0 + self.rng.uniform(-self.model.noise, self.model.noise))
        return x

    def _reserve(self, key, ready: float, service: float) -> float:
        start = max(ready, self._free.get(key, 0.0))
        end = start + service
        self._free[key] = end
        return end

    def connect(self, client_key, server: CacheServer | None, config: RdmaConfig, region_count: int,
                distance: int = 1, existing: list[int] | None = None,
                dry_group=None) -> tuple[SimQueuePair, list[tuple[int, int]]]:
        """Open a queue pair; the server allocates ``region_count`` regions and returns tokens.

        With ``server=None`` the connection is timing-only: requests cost the
        same but touch no memory.  Dry connections sharing ``dry_group`` share
        server threads and NIC, like connections to one real server.
        """
        server_key = None
        if server is None:
            cid, grants = next(self._conn_ids), []
            server_key = ("dry", dry_group if dry_group is not None else cid)
        else:
            if server.mode == "terminated":
                raise ConnectionFailed(f"server {server.server_id} unreachable")
            if region_count < 1 and not existing:
                raise ValueError("region_count must be >= 1")
            cid, grants = server.handle_connect(region_count, config, existing)
            if id(server) not in self._watched:
                self._watched.add(id(server))
                server.on_terminate.append(self._server_down)
        qp = SimQueuePair(self, server, cid, config, distance, client_key, grants, len(self.qps),
                         server_key)
        self.qps.append(qp)
        self.log.append((self.sim.now, "connect", cid, len(grants)))
        return qp, grants

    def _server_down(self, server: CacheServer) -> None:
        for qp in self.qps:
            if qp.server is server and not qp.closed and not qp.failed:
                self.fail_link(qp)

    def fail_link(self, qp: SimQueuePair) -> None:
        self.log.append((self.sim.now, "link-fail", qp.connection_id, qp.in_flight))
        qp._fail_pending()

    # -- cost chain ------------------------------------------------------------------
    def _launch(self, qp: SimQueuePair, batch: RequestBatch) -> None:
        m = self.model
        now = self.sim.now
        k = len(batch.requests)
        half_rtt = m.rtt(qp.distance) / 2
        server_key = qp.server_key
        t = self._reserve(("cpu", qp.client_key), now, self._jit(m.client_batch_cost / 2 + m.client_op_cost * k))
        if batch.one_sided:
            req = batch.requests[0]
            if req.op is Op.WRITE and req.length > m.inline_threshold:
                t += self._jit(m.dma_fetch_cost)
        elif batch.wire_size > m.inline_threshold:
            t += self._jit(m.dma_fetch_cost)
        t = self._reserve(("nic-out", qp.client_key[0] if isinstance(qp.client_key, tuple) else qp.client_key),
                          t, m.wire_time(batch.wire_size))
        t += self._jit(half_rtt)
        if batch.one_sided:
            dma = m.dma_fetch_cost if batch.requests[0].op is Op.READ else 0.0
            t = self._reserve(("dma", server_key), t, self._jit(dma))
        else:
            s = max(qp.config.s, 1)
            thread = qp.index % s
            t = self._reserve(("srv", server_key, thread), t,
                              self._jit(m.per_batch_cpu_cost + m.per_op_cpu_cost * k))
        t = max(t, qp._last_exec)
        qp._last_exec = t
        self.sim.at(t, self._execute, qp, batch)

    def _execute(self, qp: SimQueuePair, batch: RequestBatch) -> None:
        if qp.failed:
            return
        m = self.model
        bid = batch.batch_id
        try:
            if qp.server is None:
                resp = ResponseBatch(bid, [Response(Status.OK, bytes(r.length) if r.op is Op.READ else b"")
                                           for r in batch.requests])
            elif batch.one_sided:
                resp = ResponseBatch(bid, [qp.server.execute_one_sided(batch.requests[0], batch.token or 0,
                                                                        qp.connection_id, bid)])
            else:
                resp = qp.server.execute_batch(batch, qp.connection_id)
        except Exception:
            self.fail_link(qp)
            return
        self.log.append((self.sim.now, "exec", qp.connection_id, bid))
        t = self.sim.now
        if not batch.one_sided and batch.response_size > m.inline_threshold:
            t += self._jit(m.dma_fetch_cost)
        server_key = qp.server_key
        t = self._reserve(("nic-srv", server_key), t, m.wire_time(batch.response_size))
        t += self._jit(m.rtt(qp.distance) / 2) + self._jit(m.client_batch_cost / 2)
        t = max(t, qp._last_done)
        qp._last_done = t
        self.sim.at(t, self._complete, qp, resp)

    def _complete(self, qp: SimQueuePair, resp: ResponseBatch) -> None:
        if qp.failed:
            return
        qp._done[resp.batch_id] = resp
        self.log.append((self.sim.now, "done", qp.connection_id, resp.batch_id))
        if qp.on_completion:
            qp.on_completion(qp)

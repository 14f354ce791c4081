"""Performance oracles: deterministic maps from a configuration to a PerfPoint.

An oracle is any callable ``oracle(config, record_size, distance) -> PerfPoint``.
Oracles that can evaluate many configurations at once also expose
``evaluate(c, s, b, q, record_size, distance) -> ndarray[..., 4]``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..core import RdmaConfig
from ..transport.netmodel import NetworkModel
from ..transport.sim import SimFabric, Simulator
from ..transport.wire import Op, Request, RequestBatch
from .tree import PerfPoint, Source

# Fig. 3 calibration: 8-byte writes at one switch
ANCHOR_LAT_US = 4.1
ANCHOR_MOPS = 1.2
PEAK_LAT_US = 538.0
PEAK_MOPS = 205.0
PEAK_CONFIG = (30, 30, 512, 16)


def _solve_batch_exponent(ratio: float, others: dict[str, float]) -> float:
    c, s, b, q = PEAK_CONFIG
    rest = c ** others["c"] * (1 + s) ** others["s"] * q ** others["q"]
    return math.log(ratio / rest) / math.log(b)


@dataclass(frozen=True)
class SyntheticOracle:
    """Monotone power-law model anchored at the latency- and throughput-optimal corners.

    Latency and throughput are products of per-parameter power laws, so both
    are non-decreasing in every parameter.  The batch exponents are solved
    so that the all-maximum corner lands on the throughput-optimal anchor.
    """

    lat_exp: dict = field(default_factory=lambda: {"c": 0.3, "s": 0.1, "q": 0.25})
    thr_exp: dict = field(default_factory=lambda: {"c": 0.6, "s": 0.2, "q": 0.3})
    net: NetworkModel = field(default_factory=NetworkModel)
    q_ref: int = 1

    def exponents(self) -> tuple[dict, dict]:
        lat = dict(self.lat_exp, b=_solve_batch_exponent(PEAK_LAT_US / ANCHOR_LAT_US, self.lat_exp))
        thr = dict(self.thr_exp, b=_solve_batch_exponent(PEAK_MOPS / ANCHOR_MOPS, self.thr_exp))
        return lat, thr

    def evaluate(self, c, s, b, q, record_size: int = 8, distance: int = 1) -> np.ndarray:
        c, s, b, q = (np.asarray(x, dtype=float) for x in (c, s, b, q))
        le, te = self.exponents()
        net = self.net
        base = ANCHOR_LAT_US + (net.rtt(distance) - net.rtt(1)) + net.wire_time(max(record_size - 8, 0))
        if record_size > net.inline_threshold:
            base += net.dma_fetch_cost
        t0 = ANCHOR_MOPS * ANCHOR_LAT_US / base
        qr = q / self.q_ref
        shape = c ** le["c"] * (1 + s) ** le["s"] * b ** le["b"] * qr ** le["q"]
        wlat = base * shape
        rlat = wlat + (net.dma_fetch_cost if record_size <= net.inline_threshold else 0.0)
        wthr = t0 * c ** te["c"] * (1 + s) ** te["s"] * b ** te["b"] * qr ** te["q"]
        cap = net.bandwidth / (record_size * 8) / 1e6
        wthr = np.minimum(wthr, cap)
        rthr = wthr * wlat / rlat
        return np.stack(np.broadcast_arrays(rlat, wlat, rthr, wthr), axis=-1)

    def __call__(self, config: RdmaConfig, record_size: int = 8, distance: int = 1) -> PerfPoint:
        v = self.evaluate(*config.as_tuple(), record_size, distance)
        return PerfPoint(*map(float, v))


@dataclass(frozen=True)
class AffineOracle:
    """Every metric is an affine function of (c, s, b, q); interpolation must be exact on it."""

    intercept: tuple = (3.0, 2.5, 1.0, 0.8)
    weights: tuple = ((0.5, 0.2, 0.05, 0.3), (0.4, 0.3, 0.04, 0.2),
                      (0.9, 0.1, 0.02, 0.05), (0.7, 0.2, 0.03, 0.06))

    def evaluate(self, c, s, b, q, record_size: int = 8, distance: int = 1) -> np.ndarray:
        x = np.stack(np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (c, s, b, q))), axis=-1)
        return np.asarray(self.intercept) + x @ np.asarray(self.weights).T

    def __call__(self, config: RdmaConfig, record_size: int = 8, distance: int = 1) -> PerfPoint:
        return PerfPoint(*map(float, self.evaluate(*config.as_tuple())))


class RandomMonotoneOracle:
    """Seeded random oracle, non-decreasing in each parameter with the others fixed.

    Each metric is a product of per-parameter increasing step sequences with a
    random positive base, so the model has interactions but stays monotone.
    """

    def __init__(self, seed: int, c_max: int = 16, b_max: int = 16, q_max: int = 16):
        rng = np.random.default_rng(seed)
        self._tables = []
        for _ in range(4):
            steps = {}
            for name, n in (("c", c_max + 1), ("s", c_max + 1), ("b", b_max + 1), ("q", q_max + 1)):
                inc = rng.exponential(rng.uniform(0.01, 0.3), size=n)
                inc[rng.random(n) < 0.2] = 0.0          # plateaus
                steps[name] = np.exp(np.cumsum(inc))
            self._tables.append((rng.uniform(1.0, 5.0), steps))

    def evaluate(self, c, s, b, q, record_size: int = 8, distance: int = 1) -> np.ndarray:
        c, s, b, q = (np.asarray(x, dtype=int) for x in (c, s, b, q))
        out = [base * t["c"][c] * t["s"][s] * t["b"][b] * t["q"][q] for base, t in self._tables]
        return np.stack(np.broadcast_arrays(*out), axis=-1)

    def __call__(self, config: RdmaConfig, record_size: int = 8, distance: int = 1) -> PerfPoint:
        return PerfPoint(*map(float, self.evaluate(*config.as_tuple())))


@dataclass(frozen=True)
class QueueDepthProfile:
    """Replays a measured (q -> latency, throughput) profile at c=1, s=0, b=1.

    The default points follow the one-connection measurements: q=1 at 12 us and
    0.22 MOPS, q=4 at 7.1 us and 0.74 MOPS, deeper queues trading latency for
    throughput.  Depths between points are linearly interpolated.
    """

    points: tuple = ((1, 12.0, 0.22), (2, 9.4, 0.42), (3, 8.0, 0.60), (4, 7.1, 0.74),
                     (8, 7.9, 1.05), (16, 10.5, 1.30))

    def __call__(self, config: RdmaConfig, record_size: int = 8, distance: int = 1) -> PerfPoint:
        qs, lat, thr = (np.array(col, dtype=float) for col in zip(*self.points))
        lq = float(np.interp(config.q, qs, lat))
        tq = float(np.interp(config.q, qs, thr))
        return PerfPoint(lq, lq, tq, tq)


class ReplayOracle:
    """Serves leaves recorded in a model file; unknown configurations raise KeyError."""

    def __init__(self, table: dict[tuple[int, int, int, int], PerfPoint]):
        self.table = table

    @classmethod
    def from_model(cls, model) -> "ReplayOracle":
        return cls({cfg.as_tuple(): p for cfg, p in model.leaves() if p.source is not Source.EMPTY})

    def __call__(self, config: RdmaConfig, record_size: int = 8, distance: int = 1) -> PerfPoint:
        return self.table[config.as_tuple()]


def measure_sim(config: RdmaConfig, record_size: int = 8, distance: int = 1, net: NetworkModel | None = None,
                op: Op = Op.READ, batches_per_thread: int = 24, warmup_per_thread: int = 4) -> tuple[float, float]:
    """Closed-loop run on a timing-only fabric: returns (mean latency us, MOPS).

    Each of the c client threads keeps q batches of b requests in flight on
    its own connection; all connections share one server's threads and NIC.
    """
    net = net or NetworkModel()
    sim = Simulator()
    fabric = SimFabric(sim, net)
    payload = bytes(record_size) if op is Op.WRITE else b""
    lat_sum = 0.0
    lat_n = 0
    ops_done = 0
    t_start = None
    measured_until = [0.0]
    target = warmup_per_thread + batches_per_thread

    def make_batch():
        return RequestBatch(0, [Request(op, 0, 0, record_size, payload) for _ in range(config.b)])

    for i in range(config.c):
        qp, _ = fabric.connect(("client", i), None, config, 1, distance, dry_group="server")
        state = {"posted": {}, "completed": 0}

        def on_done(qp, state=state):
            nonlocal lat_sum, lat_n, ops_done, t_start
            for resp in qp.poll():
                sent = state["posted"].pop(resp.batch_id)
                state["completed"] += 1
                if state["completed"] == warmup_per_thread:
                    t_start = sim.now if t_start is None else max(t_start, sim.now)
                elif warmup_per_thread < state["completed"] <= target:
                    lat_sum += sim.now - sent
                    lat_n += 1
                    ops_done += config.b
                    measured_until[0] = max(measured_until[0], sim.now)
                if state["completed"] + len(state["posted"]) < target + config.q:
                    batch = make_batch()
                    if qp.post_batch(batch):
                        state["posted"][batch.batch_id] = sim.now

        qp.on_completion = on_done
        for _ in range(config.q):
            batch = make_batch()
            qp.post_batch(batch)
            state["posted"][batch.batch_id] = sim.now
    sim.run()
    window = max(measured_until[0] - (t_start or 0.0), 1e-9)
    return lat_sum / max(lat_n, 1), ops_done / window


@dataclass
class SimMeasuredOracle:
    """Measures each configuration on the simulated fabric (reads, then writes)."""

    net: NetworkModel = field(default_factory=NetworkModel)
    batches_per_thread: int = 24
    warmup_per_thread: int = 4

    def _net_for(self, config: RdmaConfig, op: Op) -> NetworkModel:
        if not self.net.noise:
            return self.net
        digest = hashlib.blake2b(f"{self.net.seed}/{config.as_tuple()}/{int(op)}".encode(), digest_size=4)
        return replace(self.net, seed=int.from_bytes(digest.digest(), "little"))

    def __call__(self, config: RdmaConfig, record_size: int = 8, distance: int = 1) -> PerfPoint:
        kw = dict(batches_per_thread=self.batches_per_thread, warmup_per_thread=self.warmup_per_thread)
        rl, rt = measure_sim(config, record_size, distance, self._net_for(config, Op.READ), Op.READ, **kw)
        wl, wt = measure_sim(config, record_size, distance, self._net_for(config, Op.WRITE), Op.WRITE, **kw)
        return PerfPoint(rl, wl, rt, wt)


__all__ = ["SyntheticOracle", "AffineOracle", "RandomMonotoneOracle", "QueueDepthProfile", "ReplayOracle",
           "SimMeasuredOracle", "measure_sim"]

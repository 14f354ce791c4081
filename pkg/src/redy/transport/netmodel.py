"""Parametric cost model for the simulated fabric.

Defaults are calibrated so a lone 8-byte one-sided read at one switch costs
4.1 us end to end and a 1 GiB region migrates in 1.09 s.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from ..core import GiB, RdmaConfig


def _default_rtt() -> dict[int, float]:
    return {1: 2.9, 3: 3.9, 5: 4.9}


@dataclass(frozen=True)
class NetworkModel:
    base_rtt: dict[int, float] = field(default_factory=_default_rtt)
    bandwidth: float = 100e9              # bits/sec
    per_op_cpu_cost: float = 0.05         # server cpu per request, us
    per_batch_cpu_cost: float = 0.3       # server cpu per two-sided batch, us
    client_batch_cost: float = 0.5        # client cpu per batch (issue + completion), us
    client_op_cost: float = 0.01          # client cpu per request, us
    dma_fetch_cost: float = 0.7           # NIC fetch of non-inlined data over PCIe, us
    inline_threshold: int = 172
    migration_bandwidth: float = GiB * 8 / 1.09   # bits/sec for region copies
    vm_provision_time: float = 0.0        # us to bring up a replacement VM
    noise: float = 0.0                    # relative jitter half-width
    seed: int = 0

    def __post_init__(self):
        vals = [self.bandwidth, self.per_op_cpu_cost, self.per_batch_cpu_cost, self.client_batch_cost,
                self.client_op_cost, self.dma_fetch_cost, self.inline_threshold, self.migration_bandwidth,
                self.vm_provision_time, self.noise, *self.base_rtt.values()]
        if any(v < 0 for v in vals):
            raise ValueError("network model costs must be >= 0")
        if self.bandwidth == 0 or self.migration_bandwidth == 0:
            raise ValueError("bandwidth must be positive")

    def rtt(self, distance: int) -> float:
        try:
            return self.base_rtt[distance]
        except KeyError:
            raise ValueError(f"no base RTT for distance {distance}") from None

    def wire_time(self, nbytes: int) -> float:
        return nbytes * 8 / self.bandwidth * 1e6

    def connection_service(self, nbytes: int, requests: int) -> float:
        return self.wire_time(nbytes) + self.per_op_cpu_cost * requests

    def migration_time(self, nbytes: int) -> float:
        return nbytes * 8 / self.migration_bandwidth * 1e6


def simulate_cost(model: NetworkModel, config: RdmaConfig, batch_bytes: int, distance: int,
                  in_flight: int = 1) -> float:
    """Latency contribution (us) of one batch on a connection with ``in_flight`` batches queued.

    Each connection is a FIFO server; a batch waits behind ``in_flight - 1``
    others of the same shape.
    """
    in_flight = max(1, min(in_flight, config.q))
    service = model.connection_service(batch_bytes, config.b if batch_bytes else 0)
    return model.rtt(distance) + model.wire_time(batch_bytes) + (in_flight - 1) * service

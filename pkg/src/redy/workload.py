"""YCSB-style workload generation: uniform and Zipfian keys with a read/write mix."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np


def _helper1(x):
    # log1p(x)/x, stable near 0
    x = np.asarray(x, dtype=float)
    small = np.abs(x) <= 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1 - x / 2 + x * x / 3 - x ** 3 / 4, np.log1p(safe) / safe)


def _helper2(x):
    # expm1(x)/x, stable near 0
    x = np.asarray(x, dtype=float)
    small = np.abs(x) <= 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1 + x / 2 + x * x / 6 + x ** 3 / 24, np.expm1(safe) / safe)


class ZipfSampler:
    """Ranks 1..n with P(r) proportional to r^-theta, by rejection-inversion.

    Each draw costs O(1) expected time regardless of n, and the output is a
    pure function of the numpy Generator state.
    """

    def __init__(self, n: int, theta: float):
        if n < 1:
            raise ValueError("n must be >= 1")
        if theta <= 0:
            raise ValueError("theta must be > 0")
        self.n, self.theta = n, theta
        self._hx1 = float(self._H(1.5)) - 1.0
        self._hn = float(self._H(n + 0.5))
        self._s = 2.0 - float(self._Hinv(self._H(2.5) - self._h(2.0)))

    def _h(self, x):
        return np.exp(-self.theta * np.log(x))

    def _H(self, x):
        lx = np.log(x)
        return _helper2((1.0 - self.theta) * lx) * lx

    def _Hinv(self, x):
        t = np.maximum(np.asarray(x, dtype=float) * (1.0 - self.theta), -1.0)
        return np.exp(_helper1(t) * x)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.int64)
        todo = np.arange(size)
        while todo.size:
            u = self._hn + rng.random(todo.size) * (self._hx1 - self._hn)
            x = self._Hinv(u)
            k = np.clip(np.floor(x + 0.5), 1, self.n)
            ok = (k - x <= self._s) | (u >= self._H(k + 0.5) - self._h(k))
            out[todo[ok]] = k[ok].astype(np.int64)
            todo = todo[~ok]
        return out


def zipf_probabilities(n: int, theta: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=float) ** theta
    return w / w.sum()


@dataclass
class WorkloadSpec:
    distribution: str = "uniform"          # "uniform" or "zipfian"
    theta: float = 0.99
    record_count: int = 10 ** 6
    key_size: int = 8
    value_size: int = 8
    read_fraction: float = 1.0
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("uniform", "zipfian"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ValueError("read fraction must lie in [0, 1]")
        if self.record_count < 1 or self.threads < 1:
            raise ValueError("record_count and threads must be >= 1")

    @property
    def record_size(self) -> int:
        return self.key_size + self.value_size


class OpStream:
    """Deterministic per-thread stream of (is_read, key) pairs, generated in blocks."""

    def __init__(self, spec: WorkloadSpec, thread: int = 0, block: int = 4096):
        self.spec = spec
        self.rng = np.random.default_rng([spec.seed, thread])
        self.block = block
        self._zipf = ZipfSampler(spec.record_count, spec.theta) if spec.distribution == "zipfian" else None
        self._keys = np.empty(0, dtype=np.int64)
        self._reads = np.empty(0, dtype=bool)
        self._i = 0

    def _refill(self) -> None:
        n = self.block
        if self._zipf is None:
            keys = self.rng.integers(0, self.spec.record_count, n)
        else:
            # rank 1 is the hottest key; scramble ranks so hot keys are not adjacent
            keys = (self._zipf.sample(self.rng, n) - 1) * 2654435761 % self.spec.record_count
        self._keys = keys
        self._reads = self.rng.random(n) < self.spec.read_fraction
        self._i = 0

    def next(self) -> tuple[bool, int]:
        if self._i >= len(self._keys):
            self._refill()
        i = self._i
        self._i += 1
        return bool(self._reads[i]), int(self._keys[i])

    def take(self, n: int) -> list[tuple[bool, int]]:
        return [self.next() for _ in range(n)]


def gen_workload(spec: WorkloadSpec, ops_per_thread: int) -> dict[int, list[tuple[bool, int]]]:
    return {t: OpStream(spec, t).take(ops_per_thread) for t in range(spec.threads)}


def zipf_keys(n: int, theta: float, draws: int, seed: int = 0) -> np.ndarray:
    """Raw Zipf ranks (1-based), for distribution checks."""
    return ZipfSampler(n, theta).sample(np.random.default_rng(seed), draws)


def iter_ops(spec: WorkloadSpec, thread: int = 0) -> Iterator[tuple[bool, int]]:
    s = OpStream(spec, thread)
    while True:
        yield s.next()



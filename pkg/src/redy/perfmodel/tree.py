"""The five-level configuration tree and its dense leaf storage.

Levels from the root: s, c, b, q.  Under s the c children run from
max(s, 1) to C; under s = 0 the only b child is 1.  Leaves are kept as one
dense float array per s value, indexed ``[c - c_lo(s), b - 1, q - q_min, metric]``.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator

import numpy as np

from ..core import RdmaConfig, SearchSpaceBounds

METRICS = ("read_lat_us", "write_lat_us", "read_mops", "write_mops")
RLAT, WLAT, RTHR, WTHR = range(4)
CSV_HEADER = ["c", "s", "b", "q", *METRICS, "source"]


class Source(IntEnum):
    EMPTY = 0
    MEASURED = 1
    INTERPOLATED = 2


@dataclass(frozen=True)
class PerfPoint:
    read_latency_us: float
    write_latency_us: float
    read_mops: float
    write_mops: float
    source: Source = Source.MEASURED

    def as_array(self) -> np.ndarray:
        return np.array([self.read_latency_us, self.write_latency_us, self.read_mops, self.write_mops])


def count_configs(bounds: SearchSpaceBounds) -> int:
    """Closed-form leaf count: sum_{c=1..C} (c+1)*B*Qv - C*(B-1)*Qv."""
    C, B, Qv = bounds.c_max, bounds.b_max, bounds.q_values
    return sum((c + 1) * B * Qv for c in range(1, C + 1)) - C * (B - 1) * Qv


def enumerate_configs(bounds: SearchSpaceBounds) -> list[tuple[int, int, int, int]]:
    """Brute force: every (c, s, b, q) in the box that satisfies the config invariants."""
    out = []
    qs = range(bounds.q_min, bounds.q_max + 1)
    for c, s, b, q in itertools.product(range(1, bounds.c_max + 1), range(0, bounds.c_max + 1),
                                        range(1, bounds.b_max + 1), qs):
        if s <= c and (s > 0 or b == 1):
            out.append((c, s, b, q))
    return out


def c_low(s: int) -> int:
    return max(s, 1)


class PerfModel:
    """Configuration tree with a PerfPoint at every leaf."""

    def __init__(self, bounds: SearchSpaceBounds, record_size: int | None = None, distance: int = 1):
        self.bounds = bounds
        self.record_size = record_size
        self.distance = distance
        C, B, Qv = bounds.c_max, bounds.b_max, bounds.q_values
        self.values: list[np.ndarray] = []
        self.source: list[np.ndarray] = []
        for s in range(C + 1):
            nc = C - c_low(s) + 1
            nb = 1 if s == 0 else B
            self.values.append(np.full((nc, nb, Qv, 4), np.nan))
            self.source.append(np.zeros((nc, nb, Qv), dtype=np.uint8))
        self._planes: dict[int, np.ndarray] = {}

    # -- structure -------------------------------------------------------
    @property
    def leaf_count(self) -> int:
        return sum(src.size for src in self.source)

    def children(self, path: tuple[int, ...] = ()) -> list[int]:
        """Edge values below the node reached by ``path`` = (s, c, b)."""
        C, B = self.bounds.c_max, self.bounds.b_max
        if len(path) == 0:
            return list(range(0, C + 1))
        if len(path) == 1:
            return list(range(c_low(path[0]), C + 1))
        if len(path) == 2:
            return [1] if path[0] == 0 else list(range(1, B + 1))
        if len(path) == 3:
            return list(range(self.bounds.q_min, self.bounds.q_max + 1))
        raise ValueError("leaves have no children")

    def index(self, c: int, s: int, b: int, q: int) -> tuple[int, tuple[int, int, int]]:
        bd = self.bounds
        if not (0 <= s <= bd.c_max and c_low(s) <= c <= bd.c_max and bd.q_min <= q <= bd.q_max
                and 1 <= b <= (1 if s == 0 else bd.b_max)):
            raise ValueError(f"config {(c, s, b, q)} outside the tree")
        return s, (c - c_low(s), b - 1, q - bd.q_min)

    def configs(self) -> Iterator[tuple[int, int, int, int]]:
        """Leaf configurations in pre-order (s, then c, then b, then q)."""
        for s in range(self.bounds.c_max + 1):
            for c in self.children((s,)):
                for b in self.children((s, c)):
                    for q in range(self.bounds.q_min, self.bounds.q_max + 1):
                        yield c, s, b, q

    def leaves(self) -> Iterator[tuple[RdmaConfig, PerfPoint]]:
        for c, s, b, q in self.configs():
            yield RdmaConfig(c, s, b, q), self.point(c, s, b, q)

    # -- access ------------------------------------------------------------
    def point(self, c: int, s: int, b: int, q: int) -> PerfPoint:
        s, idx = self.index(c, s, b, q)
        v = self.values[s][idx]
        return PerfPoint(*map(float, v), Source(int(self.source[s][idx])))

    def planes(self, s: int) -> np.ndarray:
        """Metric-major contiguous copy of one s-subtree, shape (4, nc, nb, Qv); cached."""
        p = self._planes.get(s)
        if p is None:
            p = self._planes[s] = np.ascontiguousarray(np.moveaxis(self.values[s], -1, 0))
        return p

    def invalidate(self) -> None:
        self._planes.clear()

    def set_point(self, c: int, s: int, b: int, q: int, values, source: Source = Source.MEASURED) -> None:
        s, idx = self.index(c, s, b, q)
        self._planes.pop(s, None)
        self.values[s][idx] = values
        self.source[s][idx] = source

    def count(self, source: Source) -> int:
        return int(sum((src == source).sum() for src in self.source))

    def extremes(self) -> np.ndarray:
        """(min, max) per metric over all non-empty leaves, shape (2, 4)."""
        lo = np.nanmin([np.nanmin(v.reshape(-1, 4), axis=0) for v in self.values], axis=0)
        hi = np.nanmax([np.nanmax(v.reshape(-1, 4), axis=0) for v in self.values], axis=0)
        return np.vstack([lo, hi])

    # -- file format -------------------------------------------------------
    def to_csv(self, path) -> None:
        names = {Source.MEASURED: "measured", Source.INTERPOLATED: "interpolated", Source.EMPTY: "empty"}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for c, s, b, q in self.configs():
                si, idx = self.index(c, s, b, q)
                v = self.values[si][idx]
                w.writerow([c, s, b, q, *(repr(float(x)) for x in v), names[Source(int(self.source[si][idx]))]])

    @classmethod
    def from_csv(cls, path, record_size: int | None = None, distance: int = 1) -> "PerfModel":
        rows = []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != CSV_HEADER:
                raise ValueError(f"unexpected model header {header}")
            rows = [row for row in r if row]
        if not rows:
            raise ValueError("empty model file")
        arr = np.array([[int(x) for x in row[:4]] for row in rows])
        bounds = SearchSpaceBounds(int(arr[:, 0].max()), int(arr[:, 2].max()), int(arr[:, 3].min()),
                                   int(arr[:, 3].max()))
        model = cls(bounds, record_size, distance)
        if len(rows) != model.leaf_count:
            raise ValueError(f"model file has {len(rows)} rows, tree needs {model.leaf_count}")
        kinds = {"measured": Source.MEASURED, "interpolated": Source.INTERPOLATED, "empty": Source.EMPTY}
        for row in rows:
            c, s, b, q = (int(x) for x in row[:4])
            model.set_point(c, s, b, q, [float(x) for x in row[4:8]], kinds[row[8]])
        return model


ConfigTree = PerfModel


def build_tree(bounds: SearchSpaceBounds, record_size: int | None = None, distance: int = 1) -> PerfModel:
    """An empty tree: every leaf present, none measured."""
    return PerfModel(bounds, record_size, distance)

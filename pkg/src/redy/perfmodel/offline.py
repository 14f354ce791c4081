"""Offline modelling: measure the power-of-2 grid, then interpolate every other leaf.

Grid values per parameter are the powers of two inside its range plus both
range ends.  Measurement walks the grid in (s, c, b, q) order and skips a
point when throughput stopped improving along one parameter with the others
fixed; such points copy the previous value along that parameter.

Interpolation is linear in raw parameter units, one dimension at a time:
q, then b, then c within each grid s, and finally s.  Where the c >= s
constraint cuts the s-interval short (c < next grid s), the missing corner
on the s = c diagonal is first estimated along the diagonal and the leaf is
interpolated between (c, s_lo) and that diagonal point.
"""
from __future__ import annotations

import logging
from bisect import bisect_left
from typing import Callable

import numpy as np

from ..core import RdmaConfig, SearchSpaceBounds
from .tree import RTHR, WTHR, PerfModel, PerfPoint, Source, c_low

log = logging.getLogger(__name__)

Oracle = Callable[[RdmaConfig, int, int], PerfPoint]


def pow2_grid(lo: int, hi: int) -> list[int]:
    vals = {lo, hi}
    p = 1
    while p <= hi:
        if p >= lo:
            vals.add(p)
        p *= 2
    return sorted(vals)


class Grid:
    """The measured-point lattice for one set of bounds."""

    def __init__(self, bounds: SearchSpaceBounds, dense: bool = False):
        self.bounds = bounds
        C, B = bounds.c_max, bounds.b_max
        span = (lambda lo, hi: list(range(lo, hi + 1))) if dense else pow2_grid
        self.s = sorted({0, *span(1, C)})
        self._q = span(bounds.q_min, bounds.q_max)
        self._b = span(1, B)
        self._c = {s: span(c_low(s), C) for s in range(C + 1)}

    def c(self, s: int) -> list[int]:
        return self._c[s]

    def b(self, s: int) -> list[int]:
        return [1] if s == 0 else self._b

    def q(self) -> list[int]:
        return self._q

    def points(self):
        for s in self.s:
            for c in self.c(s):
                for b in self.b(s):
                    for q in self._q:
                        yield c, s, b, q

    def previous(self, point: tuple[int, int, int, int], dim: int) -> list[tuple[int, int, int, int]]:
        """Grid points before ``point`` along ``dim`` (0=c, 1=s, 2=b, 3=q), nearest first."""
        c, s, b, q = point
        if dim == 0:
            axis = self.c(s)
        elif dim == 1:
            axis = [g for g in self.s if g <= c and b in self.b(g) and c in self.c(g)]
        elif dim == 2:
            axis = self.b(s)
        else:
            axis = self._q
        i = bisect_left(axis, point[dim])
        out = []
        for v in reversed(axis[:i]):
            p = list(point)
            p[dim] = v
            out.append(tuple(p))
        return out


def _measure(oracle: Oracle, cfg: tuple, record_size: int, distance: int) -> np.ndarray | None:
    for attempt in (1, 2):
        try:
            p = oracle(RdmaConfig(*cfg), record_size, distance)
            v = np.array([p.read_latency_us, p.write_latency_us, p.read_mops, p.write_mops], dtype=float)
            if np.all(np.isfinite(v)) and np.all(v > 0):
                return v
            raise ValueError(f"non-positive measurement {v}")
        except Exception as exc:     # any oracle failure: retry once, then leave empty
            log.warning("oracle failed at %s (attempt %d): %s", cfg, attempt, exc)
    return None


def _improved(prev2: np.ndarray, prev1: np.ndarray) -> bool:
    return prev1[RTHR] > prev2[RTHR] or prev1[WTHR] > prev2[WTHR]


def offline_model(bounds: SearchSpaceBounds, oracle: Oracle, record_size: int = 8, distance: int = 1,
                  early_termination: bool = True, dense: bool = False) -> PerfModel:
    """Measure the grid through ``oracle`` and fill the rest of the tree."""
    model = PerfModel(bounds, record_size, distance)
    grid = Grid(bounds, dense)
    values: dict[tuple, np.ndarray | None] = {}
    stopped: dict[tuple, set[int]] = {}
    measured = 0
    for pt in grid.points():
        stop_dims = set()
        fill_from = None
        if early_termination:
            for dim in (3, 2, 0, 1):
                prev = grid.previous(pt, dim)
                if not prev:
                    continue
                p1 = prev[0]
                if dim in stopped[p1]:
                    stop_dims.add(dim)
                elif len(prev) > 1 and values[p1] is not None and values[prev[1]] is not None \
                        and not _improved(values[prev[1]], values[p1]):
                    stop_dims.add(dim)
                if dim in stop_dims and fill_from is None and values[p1] is not None:
                    fill_from = p1
        stopped[pt] = stop_dims
        if fill_from is not None:
            values[pt] = values[fill_from]
            model.set_point(*pt, values[pt], Source.INTERPOLATED)
            continue
        v = _measure(oracle, pt, record_size, distance)
        measured += 1
        values[pt] = v
        if v is not None:
            model.set_point(*pt, v, Source.MEASURED)
    log.info("offline model: %d grid points, %d measured", len(values), measured)
    fill(model, grid)
    return model


def _fill_axis(a: np.ndarray, axis: int, knots: list[int]) -> None:
    """Linear fill of ``a`` along ``axis`` from the values at ``knots`` (in place)."""
    x = np.moveaxis(a, axis, 0)
    n = x.shape[0]
    k = np.asarray(knots)
    xk = x[k].copy()
    if len(k) == 1:
        x[:] = xk[0]
        return
    pos = np.arange(n)
    seg = np.clip(np.searchsorted(k, pos, side="right") - 1, 0, len(k) - 2)
    w = ((pos - k[seg]) / (k[seg + 1] - k[seg])).reshape((n,) + (1,) * (x.ndim - 1))
    out = xk[seg] + w * (xk[seg + 1] - xk[seg])
    out[k] = xk
    holes = np.isnan(xk).any(axis=0)
    if holes.any():
        # lines with an empty knot: interpolate over the knots that do have values
        for idx in zip(*np.nonzero(holes)):
            line = xk[(slice(None),) + idx]
            ok = ~np.isnan(line)
            if ok.any():
                out[(slice(None),) + idx] = np.interp(pos, k[ok], line[ok])
    x[:] = out


def fill(model: PerfModel, grid: Grid) -> None:
    bounds = model.bounds
    model.invalidate()
    qi = [q - bounds.q_min for q in grid.q()]
    for s in grid.s:
        block = model.values[s]
        ci = [c - c_low(s) for c in grid.c(s)]
        bi = [b - 1 for b in grid.b(s)]
        sub = block[np.ix_(ci, bi)]
        _fill_axis(sub, 2, qi)
        block[np.ix_(ci, bi)] = sub
        sub = block[ci]
        _fill_axis(sub, 1, bi)
        block[ci] = sub
        _fill_axis(block, 0, ci)
    gs = grid.s
    for s in range(1, bounds.c_max + 1):
        if s in gs:
            continue
        j = bisect_left(gs, s)
        s_lo, s_hi = gs[j - 1], gs[j]
        lo, hi, out = model.values[s_lo], model.values[s_hi], model.values[s]
        w = (s - s_lo) / (s_hi - s_lo)
        for c in range(s, bounds.c_max + 1):
            base = lo[c - s_lo]
            if c >= s_hi:
                out[c - s] = base + w * (hi[c - s_hi] - base)
            else:
                diag = lo[0] + ((c - s_lo) / (s_hi - s_lo)) * (hi[0] - lo[0])
                out[c - s] = base + ((s - s_lo) / (c - s_lo)) * (diag - base)
    for s in range(bounds.c_max + 1):
        src = model.source[s]
        empty = np.isnan(model.values[s]).any(axis=-1)
        src[(src != Source.MEASURED) & ~empty] = Source.INTERPOLATED
        src[empty] = Source.EMPTY


def interpolate(model: PerfModel, config: RdmaConfig) -> PerfPoint:
    """Model estimate for ``config``: the measured value on the grid, the filled value elsewhere."""
    return model.point(*config.as_tuple())


def determine_q_min(oracle: Oracle, q_max: int = 16, record_size: int = 8, distance: int = 1) -> int:
    """Largest q up to which every deeper queue improved both latency and throughput."""
    prev = oracle(RdmaConfig(1, 0, 1, 1), record_size, distance)
    best = 1
    for q in range(2, q_max + 1):
        cur = oracle(RdmaConfig(1, 0, 1, q), record_size, distance)
        lat_better = cur.read_latency_us < prev.read_latency_us and cur.write_latency_us < prev.write_latency_us
        thr_better = cur.read_mops > prev.read_mops and cur.write_mops > prev.write_mops
        if not (lat_better and thr_better):
            break
        best, prev = q, cur
    return best

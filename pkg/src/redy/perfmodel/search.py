"""Online SLO search over a PerfModel.

``search`` is the pre-order traversal with pruning: a leaf is INVALID when a
latency ceiling is exceeded, SUCCESS when it is valid and meets both
throughput floors, CONTINUE otherwise.  An INVALID child stops its siblings.

Three implementations share those semantics: ``search_reference`` walks the
tree recursively, ``search`` evaluates a whole s-subtree at once with numpy,
and ``scan_first`` is the unpruned linear scan used as an oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ..core import RdmaConfig, Slo
from .tree import RLAT, RTHR, WLAT, WTHR, PerfModel, PerfPoint, c_low


class Verdict(IntEnum):
    INVALID = 0
    CONTINUE = 1
    SUCCESS = 2


@dataclass(frozen=True)
class SearchResult:
    config: RdmaConfig | None
    visited: int

    @property
    def found(self) -> bool:
        return self.config is not None


def classify(p: PerfPoint, slo: Slo) -> Verdict:
    # written as "not <=" so an empty (NaN) leaf is never accepted
    if not (p.read_latency_us <= slo.read_latency_max and p.write_latency_us <= slo.write_latency_max):
        return Verdict.INVALID
    if p.read_mops >= slo.read_throughput_min and p.write_mops >= slo.write_throughput_min:
        return Verdict.SUCCESS
    return Verdict.CONTINUE


def satisfies(p: PerfPoint, slo: Slo) -> bool:
    return classify(p, slo) is Verdict.SUCCESS


def search_reference(model: PerfModel, slo: Slo) -> SearchResult:
    """Literal recursive traversal; slow, kept as the executable definition."""
    visited = 0
    path: list[int] = []

    def traverse(level: int) -> Verdict:
        nonlocal visited
        if level == 4:
            visited += 1
            s, c, b, q = path
            return classify(model.point(c, s, b, q), slo)
        node_result = Verdict.INVALID
        for v in model.children(tuple(path)):
            path.append(v)
            r = traverse(level + 1)
            if r is Verdict.SUCCESS:
                return r
            path.pop()
            if r is Verdict.INVALID:
                return node_result
            node_result = Verdict.CONTINUE
        return node_result

    if traverse(0) is Verdict.SUCCESS:
        s, c, b, q = path
        return SearchResult(RdmaConfig(c, s, b, q), visited)
    return SearchResult(None, visited)


def _reduce(status: np.ndarray, visits: np.ndarray):
    """Fold the last axis (children left to right) into parent verdicts.

    Returns (parent status, parent visit counts, index of the stopping child).
    """
    stop = status != Verdict.CONTINUE
    has = stop.any(axis=-1)
    j = stop.argmax(axis=-1)
    cum = np.cumsum(visits, axis=-1)
    stop_status = np.take_along_axis(status, j[..., None], axis=-1)[..., 0]
    stop_visits = np.take_along_axis(cum, j[..., None], axis=-1)[..., 0]
    parent = np.where(has,
                      np.where(stop_status == Verdict.SUCCESS, Verdict.SUCCESS,
                               np.where(j == 0, Verdict.INVALID, Verdict.CONTINUE)),
                      Verdict.CONTINUE)
    return parent.astype(np.int8), np.where(has, stop_visits, cum[..., -1]), j


def _leaf_status(planes: np.ndarray, slo: Slo) -> np.ndarray:
    valid = (planes[RLAT] <= slo.read_latency_max) & (planes[WLAT] <= slo.write_latency_max)
    ok = valid & (planes[RTHR] >= slo.read_throughput_min) & (planes[WTHR] >= slo.write_throughput_min)
    return valid.view(np.int8) + ok.view(np.int8)


def _reduce_leaves(status: np.ndarray):
    stop = status != Verdict.CONTINUE
    has = stop.any(axis=-1)
    j = stop.argmax(axis=-1)
    stop_status = np.take_along_axis(status, j[..., None], axis=-1)[..., 0]
    parent = np.where(has,
                      np.where(stop_status == Verdict.SUCCESS, Verdict.SUCCESS,
                               np.where(j == 0, Verdict.INVALID, Verdict.CONTINUE)),
                      Verdict.CONTINUE)
    return parent.astype(np.int8), np.where(has, j + 1, status.shape[-1]), j


def search(model: PerfModel, slo: Slo) -> SearchResult:
    """Pruned search, vectorised per s-subtree; same result and visit count as the reference."""
    visited = 0
    for s in range(len(model.values)):
        status = _leaf_status(model.planes(s), slo)
        st_b, vis_b, jq = _reduce_leaves(status)
        st_c, vis_c, jb = _reduce(st_b, vis_b)
        st_s, vis_s, jc = _reduce(st_c[None, :], vis_c[None, :])
        visited += int(vis_s[0])
        verdict = Verdict(int(st_s[0]))
        if verdict is Verdict.SUCCESS:
            ci = int(jc[0])
            bi = int(jb[ci])
            qi = int(jq[ci, bi])
            return SearchResult(RdmaConfig(c_low(s) + ci, s, bi + 1, model.bounds.q_min + qi), visited)
        if verdict is Verdict.INVALID:
            break
    return SearchResult(None, visited)


def scan_first(model: PerfModel, slo: Slo) -> SearchResult:
    """First satisfying leaf of the unpruned pre-order scan."""
    n = 0
    for cfg, p in model.leaves():
        n += 1
        if classify(p, slo) is Verdict.SUCCESS:
            return SearchResult(cfg, n)
    return SearchResult(None, n)

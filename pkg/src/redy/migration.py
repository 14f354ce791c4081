"""Region migration, failure recovery and reshape copies as environment coroutines.

Optimized migration moves one region at a time: the region is marked
migrating (new writes park, reads still go to the old VM), in-flight writes
drain, the new VM pulls the region, the table is remapped and the parked
writes are released in order.  The baseline pauses every region being moved,
reads included, for the whole batch of copies.
"""
from __future__ import annotations

import logging

from .core import RegionStatus
from .env import TargetLost
from .errors import MigrationAborted, RedyError

log = logging.getLogger(__name__)


def _alive(h, vm_id: str) -> bool:
    host = h.env.host(vm_id)
    return host is not None and host.mode != "terminated"


def prepare_target(h, dst: str, count: int = 1):
    """Allocate ``count`` regions on ``dst`` and give every client thread access to them."""
    host = h.env.host(dst)
    if host is None or host.mode == "terminated":
        raise TargetLost(f"target {dst} is gone")
    try:
        rids = [r for r, _ in host.allocate_regions(count)]
    except RedyError as exc:
        raise TargetLost(str(exc)) from exc
    have = [e.physical_region_id for e in h.table.entries if e.vm_id == dst]
    errors = []

    def ensure(ct):
        try:
            ct.ensure(dst, have + rids)
        except RedyError as exc:
            errors.append(exc)
    cmds = h.run_on_threads(ensure)
    yield ("until", lambda: all(c.done for c in cmds))
    if errors:
        raise TargetLost(str(errors[0]))
    return rids


def _retire_source(h, src: str, src_rid: int, dst: str):
    """Release the source region; the last one also closes connections and retires the VM."""
    mgr = h.client.manager
    if not h.table.entries_on(src):
        yield ("until", lambda: h.outstanding[src] == 0)
        cmds = h.run_on_threads(lambda ct: ct.disconnect(src))
        yield ("until", lambda: all(c.done for c in cmds))
    else:
        # reads routed to the old copy before the cutover may still be queued
        yield ("until", lambda: h.region_out[(src, src_rid)] == 0)
        if _alive(h, src):
            h.env.host(src).release_regions([src_rid])
    mgr.moved(h.mgr_id, src, dst)


def _copy_with_retry(h, idx: int, src: str, token: int, dst: str, report):
    """Copy one region, provisioning a new target if the current one dies.  Returns (dst, rid)."""
    while True:
        try:
            rid, = yield from prepare_target(h, dst)
            yield ("copy", src, token, dst, rid, h.region_size)
            return dst, rid
        except TargetLost as exc:
            log.warning("migration target %s lost (%s); restarting region %d", dst, exc, idx)
            h.alerts.append(("target-lost", dst, idx))
            dst = h.client.manager.provision(h.mgr_id)


def migrate(h, indices: list[int], targets: list[str], optimized: bool, report):
    targets = list(targets)
    if optimized:
        for i, idx in enumerate(indices):
            e = h.table.entries[idx]
            src, src_rid = e.vm_id, e.physical_region_id
            if not _alive(h, src):
                h.fail_region(idx, f"source {src} gone")
                report.failed.append(idx)
                continue
            h.set_status(idx, RegionStatus.MIGRATING)
            yield ("until", lambda idx=idx: h.writes_out[idx] == 0)
            token = h.env.host(src).regions[src_rid].token
            try:
                dst, rid = yield from _copy_with_retry(h, idx, src, token, targets[i], report)
            except MigrationAborted as exc:
                h.fail_region(idx, str(exc))
                report.failed.append(idx)
                continue
            if dst != targets[i]:
                targets[i:] = [dst if t == targets[i] else t for t in targets[i:]]
            h.remap(idx, dst, rid)
            report.moved.append(idx)
            yield from _retire_source(h, src, src_rid, dst)
    else:
        for idx in indices:
            h.set_status(idx, RegionStatus.PAUSED)
        yield ("until", lambda: all(h.writes_out[i] == 0 for i in indices))
        done = []
        for i, idx in enumerate(indices):
            e = h.table.entries[idx]
            src, src_rid = e.vm_id, e.physical_region_id
            try:
                if not _alive(h, src):
                    raise MigrationAborted(f"source {src} gone")
                token = h.env.host(src).regions[src_rid].token
                dst, rid = yield from _copy_with_retry(h, idx, src, token, targets[i], report)
            except MigrationAborted as exc:
                h.fail_region(idx, str(exc))
                report.failed.append(idx)
                continue
            done.append((idx, src, src_rid, dst, rid))
        for idx, src, src_rid, dst, rid in done:
            h.remap(idx, dst, rid)
            report.moved.append(idx)
            yield from _retire_source(h, src, src_rid, dst)
    report.finished_at = h.env.now()
    if report.failed:
        msg = f"regions {report.failed} lost"
        if report.deadline is not None:
            msg += " (migration missed the reclamation deadline)"
        h.alerts.append(("migration-failed", tuple(report.failed), msg))
        if h.on_failure is not None:
            h.on_failure(list(report.failed), msg)
    return report


def recover(h, vm_id: str, indices: list[int]):
    """A VM died without warning: re-home its regions, repopulating from the source file if any."""
    for idx in indices:
        if h.table.entries[idx].status is not RegionStatus.FAILED:
            h.fail_region(idx, f"{vm_id} failed")
    if h.on_failure is not None:
        h.on_failure(list(indices), f"{vm_id} failed")
    cmds = h.run_on_threads(lambda ct: ct.disconnect(vm_id))
    yield ("until", lambda: all(c.done for c in cmds))
    mgr = h.client.manager
    dst = mgr.provision(h.mgr_id)
    while True:
        try:
            rids = yield from prepare_target(h, dst, len(indices))
            break
        except TargetLost:
            dst = mgr.provision(h.mgr_id)
    for idx, rid in zip(indices, rids):
        h.remap(idx, dst, rid)
    mgr.moved(h.mgr_id, vm_id, dst, len(indices))
    if h.source is not None:
        h.client._populate(h, indices)
        h.alerts.append(("repopulated", vm_id, tuple(indices)))
    else:
        h.alerts.append(("replaced-empty", vm_id, tuple(indices)))
    return dst


def copy_cache(old, new):
    """Copy every region the two caches share (reshape to a new SLO)."""
    for idx in range(min(len(old.table), len(new.table))):
        a, b = old.table.entries[idx], new.table.entries[idx]
        host = old.env.host(a.vm_id)
        token = host.regions[a.physical_region_id].token
        yield ("copy", a.vm_id, token, b.vm_id, b.physical_region_id, old.region_size)

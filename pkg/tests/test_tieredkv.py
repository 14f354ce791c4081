import random

import pytest
from hypothesis import given, settings, strategies as st

from redy.client import RedyClient
from redy.clustersim import ClusterConfig
from redy.core import GiB, MiB, Slo, VmSpec
from redy.env import SimEnvironment
from redy.errors import AddressOutOfBounds
from redy.tieredkv import (CacheDevice, EmulatedDevice, HybridLog, KvStore, TieredDevice, bench_tieredkv,
                           build_store, encode_record)
from redy.workload import WorkloadSpec


def two_tier(cache_cap=None, commit_point=None):
    cache = EmulatedDevice("cache", 5.0, 4, None, cache_cap)
    ssd = EmulatedDevice("ssd", 100.0, 4)
    if cache_cap is None:
        cache.capacity = None
    return TieredDevice([cache, ssd], commit_point)


def test_record_format():
    rec = encode_record(b"key", b"value")
    assert len(rec) % 8 == 0 and rec[:6] == (3).to_bytes(2, "little") + (5).to_bytes(4, "little")
    assert rec[6:14] == b"keyvalue"


def test_commit_point_controls_ack():
    fast = TieredDevice([EmulatedDevice("c", 5.0, 1, None, 1024), EmulatedDevice("s", 100.0, 1)], 1)
    slow = TieredDevice([EmulatedDevice("c", 5.0, 1, None, 1024), EmulatedDevice("s", 100.0, 1)], 2)
    assert fast.append(b"x" * 8)[1] == pytest.approx(5.0)
    assert slow.append(b"x" * 8)[1] == pytest.approx(100.0)
    with pytest.raises(ValueError):
        fast.append(b"")


def test_suffix_rule_and_boundary_reassembly():
    dev = two_tier(cache_cap=4096)
    blob = random.Random(0).randbytes(10_000)
    for i in range(0, len(blob), 1000):
        dev.append(blob[i:i + 1000])
    assert dev.begin == [10_000 - 4096, 0]
    assert dev.tier_for(9000) == 0 and dev.tier_for(1000) == 1
    data, _ = dev.read(5000, 2000)                          # spans the tier-1 begin address
    assert data == blob[5000:7000] and dev.served == [1, 1]
    with pytest.raises(AddressOutOfBounds):
        dev.read(9990, 20)


def test_cold_tier_gives_same_bytes_slower():
    dev = two_tier(cache_cap=8192)
    blob = random.Random(1).randbytes(6000)
    dev.append(blob)
    fast, t_fast = dev.read(100, 500)
    dev.mark_cold(1)
    slow, t_slow = dev.read(100, 500, now=1000.0)
    assert fast == slow == blob[100:600] and (t_slow - 1000.0) > t_fast
    dev.append(b"y" * 16)                                  # proceeds on tier 2 alone
    dev.repair(1)
    dev.append(b"z" * 16)
    assert dev.tier_for(dev.length - 8) == 0 and dev.tier_for(dev.length - 20) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(64, 4096), st.lists(st.integers(1, 700), min_size=1, max_size=40), st.data())
def test_tiers_agree_on_overlap(cap, sizes, data):
    dev = two_tier(cache_cap=cap)
    rng = random.Random(len(sizes))
    ref = bytearray()
    for n in sizes:
        chunk = rng.randbytes(n)
        dev.append(chunk)
        ref += chunk
    assert dev.begin[0] >= dev.begin[1]
    for _ in range(10):
        a = data.draw(st.integers(dev.begin[0], dev.length - 1))
        n = data.draw(st.integers(1, dev.length - a))
        assert dev.tiers[0].load(a, n) == dev.tiers[1].load(a, n) == bytes(ref[a:a + n])
        got, _ = dev.read(a, n)
        assert got == bytes(ref[a:a + n])


def test_kv_last_writer_and_missing():
    kv = build_store(0, 1024, segment_size=256)
    kv.upsert(b"k", b"v1")
    kv.upsert(b"k", b"v2")
    assert kv.read(b"k")[0] == b"v2"
    assert kv.read(b"absent")[0] is None


def test_spill_keeps_every_key_readable():
    kv = build_store(0, 1024, segment_size=1024)
    ref = {}
    rng = random.Random(2)
    heads = []
    for i in range(200):
        k = f"key{rng.randrange(80)}".encode()
        v = rng.randbytes(rng.randrange(1, 90))
        kv.upsert(k, v)
        ref[k] = v
        heads.append(kv.log.head_address)
    assert kv.log.spills >= 1 and heads == sorted(heads)
    assert kv.log.head_address <= kv.log.tail_address
    for k, v in ref.items():
        assert kv.read(k)[0] == v
    assert all(a < kv.log.tail_address for a in kv.index.entries.values())


def test_two_segments_one_budget_spills_once():
    log = HybridLog(TieredDevice([EmulatedDevice("ssd", 100.0)]), 256, 256)
    log.append(b"a" * 200)
    assert log.spill_oldest_segment() is None              # the tail segment is not read-only yet
    log.append(b"a" * 56 + b"b" * 100)
    assert log.spills == 1 and log.head_address == 256
    assert log.read(0, 256)[0] == b"a" * 256
    assert log.spill_oldest_segment() is None


def test_redy_backed_tier():
    cfg = ClusterConfig(2, 64, 256 * GiB, {1: 1}, [VmSpec("A", 8, 32 * GiB, 1.0)])
    env = SimEnvironment(cfg)
    cl = RedyClient(env, region_size=MiB)
    dev = CacheDevice(cl, cl.create(2 * MiB, Slo(8, 100, 100, 1, 1)))
    assert 1.0 < dev.latency_us < 20.0
    kv = KvStore(HybridLog(TieredDevice([dev, EmulatedDevice("ssd", 100.0)]), 4096, 1024))
    for i in range(500):
        kv.upsert(i.to_bytes(8, "little"), (i * 7).to_bytes(8, "little"))
    assert kv.log.spills > 0
    for i in range(0, 500, 37):
        assert kv.read(i.to_bytes(8, "little"))[0] == (i * 7).to_bytes(8, "little")
    assert kv.log.device.served[0] > 0


def test_bench_cache_beats_ssd_only():
    spec = WorkloadSpec(record_count=20_000, threads=8, seed=3)
    mops = [bench_tieredkv(spec, cache_size=c, memory_budget=64 * 1024, segment_size=16 * 1024,
                           duration_s=0.01)[0][5] for c in (0, 256 * 1024, 512 * 1024)]
    assert mops[0] < mops[1] < mops[2]
    assert bench_tieredkv(spec, ops=0) == []

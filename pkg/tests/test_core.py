import pytest
from hypothesis import given, strategies as st

from redy.core import (GiB, RdmaConfig, RegionStatus, RegionTable, SearchSpaceBounds, Slo, VmSpec, max_batch_for,
                       region_lookup, region_remap, region_split, regions_needed)
from redy.errors import AddressOutOfBounds, InvalidEntry


def table(n=3, region_size=GiB, capacity=None):
    return RegionTable.build(capacity or n * region_size, [(f"vm{i % 2}", i) for i in range(n)], region_size)


def test_lookup_examples():
    t = table()
    assert region_lookup(t, 0) == ("vm0", 0, 0)
    assert region_lookup(t, GiB + 5) == ("vm1", 1, 5)
    with pytest.raises(AddressOutOfBounds):
        region_lookup(t, 3 * GiB)
    with pytest.raises(AddressOutOfBounds):
        region_lookup(t, -1)


def test_split_examples():
    t = table()
    assert region_split(t, GiB - 4, 8) == [(0, GiB - 4, 4), (1, 0, 4)]
    assert region_split(t, 10, 6) == [(0, 10, 6)]
    assert region_split(t, 0, 3 * GiB) == [(0, 0, GiB), (1, 0, GiB), (2, 0, GiB)]
    with pytest.raises(AddressOutOfBounds):
        region_split(t, 3 * GiB - 1, 2)
    with pytest.raises(ValueError):
        region_split(t, 0, 0)


def _reference_extents(region_size, addr, length):
    """Byte-level reference: group each byte's (region, offset) into runs."""
    runs = []
    for a in range(addr, addr + length):
        idx, off = divmod(a, region_size)
        if runs and runs[-1][0] == idx:
            runs[-1][2] += 1
        else:
            runs.append([idx, off, 1])
    return [tuple(r) for r in runs]


@given(st.integers(1, 64), st.integers(1, 9), st.data())
def test_split_matches_byte_map(region_size, n, data):
    t = table(n, region_size)
    addr = data.draw(st.integers(0, t.capacity - 1))
    length = data.draw(st.integers(1, t.capacity - addr))
    ext = region_split(t, addr, length)
    assert ext == _reference_extents(region_size, addr, length)
    assert sum(e[2] for e in ext) == length
    vm, pr, off = region_lookup(t, addr)
    assert (pr, off) == (t.entries[ext[0][0]].physical_region_id, ext[0][1])


def test_remap_locality():
    t = table(7)
    t2 = region_remap(t, 2, "new", 99)
    assert [e for i, e in enumerate(t2.entries) if i != 2] == [e for i, e in enumerate(t.entries) if i != 2]
    assert region_lookup(t2, 2 * GiB + 1) == ("new", 99, 1)
    with pytest.raises(InvalidEntry):
        region_remap(t, 9, "x", 0)


def test_remap_resets_status():
    t = table(3).with_status(1, RegionStatus.MIGRATING)
    assert t.entry(1).status is RegionStatus.MIGRATING
    assert t.remap(1, "vmX", 5).entry(1).status is RegionStatus.ACTIVE


@given(st.lists(st.tuples(st.integers(0, 6), st.text("ab", min_size=1, max_size=2), st.integers(0, 50)),
                max_size=30))
def test_table_invariants_after_remaps(ops):
    t = table(7, 16)
    for idx, vm, pr in ops:
        t = t.remap(idx, vm, pr)
        assert len(t) == regions_needed(t.capacity, t.region_size)
        assert [e.index for e in t.entries] == list(range(7))
    last = {}
    for idx, vm, pr in ops:
        last[idx] = (vm, pr)
    for idx, (vm, pr) in last.items():
        assert region_lookup(t, idx * 16)[:2] == (vm, pr)


def test_capacity_rounds_up():
    t = RegionTable.build(GiB + 1, [("a", 0), ("a", 1)])
    assert len(t) == 2
    with pytest.raises(AddressOutOfBounds):
        t.lookup(GiB + 1)
    with pytest.raises(ValueError):
        RegionTable.build(GiB + 1, [("a", 0)])


def test_config_invariants():
    RdmaConfig(1, 0, 1, 1)
    RdmaConfig(4, 4, 8, 2)
    for bad in [(0, 0, 1, 1), (1, 2, 1, 1), (2, 0, 2, 1), (1, 1, 0, 1), (1, 1, 1, 0), (1, -1, 1, 1)]:
        with pytest.raises(ValueError):
            RdmaConfig(*bad)


def test_slo_validation():
    Slo(8, 5, 5)
    with pytest.raises(ValueError):
        Slo(0, 5, 5)
    with pytest.raises(ValueError):
        Slo(8, 0, 5)
    with pytest.raises(ValueError):
        Slo(8, 5, 5, -1)


def test_bounds():
    assert max_batch_for(8) == 512
    assert max_batch_for(1000) == 5
    b = SearchSpaceBounds.for_record_size(30, 8, 4, 16)
    assert (b.b_max, b.q_values) == (512, 13)
    with pytest.raises(ValueError):
        SearchSpaceBounds(1, 1, 5, 4)


def test_vmspec():
    v = VmSpec("A", 8, 32 * GiB, 1.0, 3, "spot")
    assert v.regions(GiB) == 32
    with pytest.raises(ValueError):
        VmSpec("A", 8, 32 * GiB, 1.0, 2)
    with pytest.raises(ValueError):
        VmSpec("A", -1, 32 * GiB, 1.0)

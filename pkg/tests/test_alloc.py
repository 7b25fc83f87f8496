from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from tagwasm import Trap
from tagwasm.alloc import LIVE_MAGIC
from tagwasm.semantics import exec_load, exec_store
from tagwasm.tagmem import ADDR_MASK, tag_of

from conftest import instance


def granule_tag(rt, inst, addr):
    return rt.store.tags[(inst.base + addr) // 16]


def addr(p):
    return p & ADDR_MASK


def test_malloc_tags_payload_and_keeps_header_ambient():
    rt, inst = instance("internal", seed=1)
    h = inst.heap
    p = h.malloc(24)
    a = addr(p)
    t = tag_of(p)
    assert t in rt.pool.allowed
    assert a % 16 == 0
    assert granule_tag(rt, inst, a) == t and granule_tag(rt, inst, a + 16) == t
    assert granule_tag(rt, inst, a - 16) == 0  # header
    assert granule_tag(rt, inst, a + 32) == 0  # next header
    hdr = inst.base + a - 16
    assert int.from_bytes(rt.store.mem[hdr:hdr + 8], "little") == 32
    assert int.from_bytes(rt.store.mem[hdr + 8:hdr + 16], "little") == LIVE_MAGIC


def test_malloc_zero_gives_one_granule():
    rt, inst = instance("internal", seed=1)
    p = inst.heap.malloc(0)
    assert p != 0
    assert inst.heap.block_at(addr(p)).size == 16


def test_payload_is_zeroed():
    rt, inst = instance("internal", seed=1)
    h = inst.heap
    p = h.malloc(32)
    exec_store(rt, inst, p, 0, 8, 0x55)
    h.free(p)
    q = h.malloc(32)
    assert addr(q) == addr(p)
    assert exec_load(rt, inst, q, 0, 8) == 0


def test_neighbours_separated_by_ambient_granule():
    rt, inst = instance("internal", seed=1)
    h = inst.heap
    a, b = h.malloc(16), h.malloc(16)
    assert addr(b) - addr(a) == 32
    with pytest.raises(Trap):
        exec_load(rt, inst, a, 16, 1)
    with pytest.raises(Trap):
        exec_load(rt, inst, b - 1, 0, 1)


def test_exhaustion_returns_null():
    rt, inst = instance("internal", seed=1)
    h = inst.heap
    assert h.malloc(1 << 20) == 0
    ptrs = []
    while (p := h.malloc(1024)) != 0:
        ptrs.append(p)
    assert len(ptrs) > 20
    for p in ptrs:
        h.free(p)
    assert len(h.blocks) == 1 and not h.blocks[0].live


def test_coalescing_restores_single_free_block():
    rt, inst = instance("internal", seed=1)
    h = inst.heap
    ps = [h.malloc(n) for n in (16, 48, 32, 100)]
    for p in (ps[1], ps[3], ps[0], ps[2]):
        h.free(p)
    assert len(h.blocks) == 1
    b = h.blocks[0]
    assert rt.store.count_not(0) == 0
    assert b.header == h.start


def test_free_null_is_noop():
    rt, inst = instance("internal", seed=1)
    inst.heap.free(0)


def test_double_free_traps_in_internal_mode():
    rt, inst = instance("internal", seed=1)
    h = inst.heap
    p = h.malloc(48)
    h.malloc(16)  # keep the block from merging with the tail
    h.free(p)
    with pytest.raises(Trap) as ei:
        h.free(p)
    assert ei.value.kind == "TagMismatch"


def test_double_free_ignored_without_internal_safety():
    rt, inst = instance("", seed=1)
    h = inst.heap
    p = h.malloc(48)
    h.free(p)
    h.free(p)
    assert all(not b.live for b in h.blocks)


def test_interior_pointer_free():
    rt, inst = instance("internal", seed=1)
    h = inst.heap
    p = h.malloc(64)
    with pytest.raises(Trap) as ei:
        h.free(p + 16)
    assert ei.value.kind == "InvalidFree"


def test_realloc_preserves_prefix_and_frees_old():
    rt, inst = instance("internal", seed=1)
    h = inst.heap
    p = h.malloc(16)
    exec_store(rt, inst, p, 0, 8, 11)
    exec_store(rt, inst, p, 8, 8, 22)
    q = h.realloc(p, 80)
    assert exec_load(rt, inst, q, 0, 8) == 11 and exec_load(rt, inst, q, 8, 8) == 22
    with pytest.raises(Trap):
        exec_load(rt, inst, p, 0, 8)
    assert h.realloc(0, 16) != 0
    assert h.realloc(q, 0) == 0


def test_realloc_of_stale_pointer_traps():
    rt, inst = instance("internal", seed=1)
    h = inst.heap
    p = h.malloc(16)
    h.malloc(16)
    h.free(p)
    with pytest.raises(Trap):
        h.realloc(p, 32)


def test_use_after_free_traps_until_reuse():
    rt, inst = instance("internal", seed=5)
    h = inst.heap
    p = h.malloc(32)
    h.malloc(16)
    h.free(p)
    for off in (0, 8, 16, 24):
        with pytest.raises(Trap):
            exec_load(rt, inst, p, off, 8)


def test_combined_mode_heap_keeps_sandbox_bit():
    rt, inst = instance("internal,external", seed=1)
    h = inst.heap
    p = h.malloc(32)
    assert tag_of(p) & 1
    assert granule_tag(rt, inst, addr(p) - 16) == 1
    h.free(p)
    assert rt.store.tag_array()[inst.base // 16:(inst.base + inst.mem_len) // 16].min() == 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 600)), min_size=1, max_size=40),
       st.sampled_from(["internal", "", "internal,external"]))
def test_heap_invariants_hold_under_random_traffic(script, mode):
    rt, inst = instance(mode, seed=3)
    h = inst.heap
    live = []
    for is_alloc, n in script:
        if is_alloc or not live:
            p = h.malloc(n)
            if p:
                live.append(p)
        else:
            h.free(live.pop(n % len(live)))
        # blocks tile the heap exactly
        cursor = h.start
        for b in h.blocks:
            assert b.header == cursor and b.size % 16 == 0 and b.size >= 16
            cursor = b.end
        assert cursor == h.limit
        # no two adjacent free blocks
        assert not any(not a.live and not b.live for a, b in zip(h.blocks, h.blocks[1:]))
        # headers stay ambient
        if "internal" in mode:
            for b in h.blocks:
                assert granule_tag(rt, inst, b.header) == inst.ambient
    for p in live:
        assert h.block_at(addr(p)).live

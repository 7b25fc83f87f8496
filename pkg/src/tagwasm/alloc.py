"""Segment-aware first-fit heap for guest memory.

Every block starts with one untagged 16-byte header granule, so two live
payloads are always separated by at least one granule carrying the
ambient tag. Payloads are created with ``segment.new`` and retired with
``segment.free``; the host-side block list is authoritative, the header
bytes in guest memory mirror it for inspection.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .semantics import (
    Instance, Trap, exec_load, exec_segment_free, exec_segment_new, exec_store, guest_pointer,
)
from .tagmem import GRANULE

if TYPE_CHECKING:
    from .runtime import Runtime

LIVE_MAGIC = 0x4556494C  # "LIVE"


@dataclass
class Block:
    header: int  # guest address of the header granule
    size: int  # payload bytes, multiple of 16
    live: bool = False

    @property
    def payload(self) -> int:
        return self.header + GRANULE

    @property
    def end(self) -> int:
        return self.payload + self.size


def _round16(n: int) -> int:
    return (n + GRANULE - 1) // GRANULE * GRANULE


class Heap:
    def __init__(self, rt: "Runtime", inst: Instance, start: int, end: int):
        # The last granule stays untagged so the final payload has an ambient neighbour.
        self.rt = rt
        self.inst = inst
        self.start = start
        self.limit = end - GRANULE
        self.blocks: list[Block] = []
        if self.limit - start >= 2 * GRANULE:
            self.blocks.append(Block(start, self.limit - start - GRANULE))
            self._write_header(self.blocks[0])

    # bookkeeping
    def _headers(self) -> list[int]:
        return [b.header for b in self.blocks]

    def block_at(self, payload: int) -> Block | None:
        i = bisect.bisect_left(self._headers(), payload - GRANULE)
        if i < len(self.blocks) and self.blocks[i].payload == payload:
            return self.blocks[i]
        return None

    def live_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.live]

    def _set_tag(self, guest_addr: int, length: int, tag: int):
        self.rt.store.set(self.inst.base + guest_addr, length, tag)

    def _write_header(self, b: Block):
        phys = self.inst.base + b.header
        if b.live:
            state = LIVE_MAGIC
        else:
            nxt = next((x.header for x in self.blocks if not x.live and x.header > b.header), 0)
            state = nxt
        self.rt.store.mem[phys:phys + 16] = b.size.to_bytes(8, "little") + state.to_bytes(8, "little")
        if self.rt.mode.tagged:
            self._set_tag(b.header, GRANULE, self.inst.ambient)

    # API
    def malloc(self, size: int) -> int:
        if size < 0 or size >= 1 << 48:
            return 0
        need = max(GRANULE, _round16(size))
        for i, b in enumerate(self.blocks):
            if not b.live and b.size >= need:
                break
        else:
            return 0
        if b.size - need >= 2 * GRANULE:
            rest = Block(b.payload + need, b.size - need - GRANULE)
            b.size = need
            self.blocks.insert(i + 1, rest)
            self._write_header(rest)
        b.live = True
        self._write_header(b)
        if self.rt.mode.internal:
            return exec_segment_new(self.rt, self.inst, b.payload, b.size, 0)
        self.rt.store.mem[self.inst.base + b.payload:self.inst.base + b.end] = bytes(b.size)
        return b.payload

    def _lookup(self, p: int) -> Block | None:
        """Block whose payload starts at ``p``; traps on stale or bogus pointers."""
        addr, tag = guest_pointer(self.rt, self.inst, p)
        b = self.block_at(addr)
        if not self.rt.mode.internal:
            return b if b is not None and b.live else None
        if b is None or not b.live:
            # Double free, stale pointer after coalescing, or an interior pointer.
            if self.start <= addr < self.limit:
                self.rt.stats.tag_checks += 1
                if not self.rt.store.matches(self.inst.base + addr, 1, tag):
                    self.rt.stats.tag_failures += 1
                    raise Trap("TagMismatch", "free of a dead or foreign pointer", address=addr)
            if b is None:
                raise Trap("InvalidFree", "pointer is not the start of a heap block", address=addr)
        return b

    def free(self, p: int):
        if p == 0:
            return
        b = self._lookup(p)
        if b is None:
            return  # undetected without internal safety
        if self.rt.mode.internal:
            exec_segment_free(self.rt, self.inst, p, b.size, 0)
        b.live = False
        self._coalesce(b)

    def _coalesce(self, b: Block):
        i = self.blocks.index(b)
        merged = False
        if i + 1 < len(self.blocks) and not self.blocks[i + 1].live:
            nxt = self.blocks.pop(i + 1)
            b.size += GRANULE + nxt.size
            merged = True
        if i > 0 and not self.blocks[i - 1].live:
            prev = self.blocks[i - 1]
            prev.size += GRANULE + b.size
            self.blocks.pop(i)
            b = prev
            merged = True
        if merged and self.rt.mode.tagged:
            self._set_tag(b.payload, b.size, self.inst.ambient)
        self._write_header(b)
        for x in self.blocks:
            if not x.live and x is not b:
                self._write_header(x)

    def realloc(self, p: int, size: int) -> int:
        if p == 0:
            return self.malloc(size)
        if size == 0:
            self.free(p)
            return 0
        b = self._lookup(p)
        if b is None:
            return 0
        old_size = b.size
        if self.rt.mode.internal:
            _, tag = guest_pointer(self.rt, self.inst, p)
            self.rt.stats.tag_checks += 1
            if not self.rt.store.matches(self.inst.base + b.payload, b.size, tag):
                self.rt.stats.tag_failures += 1
                raise Trap("TagMismatch", "realloc through a stale pointer", address=b.payload)
        q = self.malloc(size)
        if q == 0:
            return 0
        n = min(old_size, _round16(size))
        for off in range(0, n, 8):
            exec_store(self.rt, self.inst, q, off, 8, exec_load(self.rt, self.inst, p, off, 8))
        self.free(p)
        return q

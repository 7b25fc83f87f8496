"""Memory and pointer semantics shared by the interpreter and host functions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Optional

from . import pac
from .tagmem import (
    ADDR_MASK, GRANULE, MASK64, NONCANONICAL_MASK, mask_index, tag_of,
)

if TYPE_CHECKING:
    from .module import Module
    from .runtime import Runtime


class TrapKind:
    TAG_MISMATCH = "TagMismatch"
    UNALIGNED = "Unaligned"
    OUT_OF_BOUNDS = "OutOfBounds"
    AUTH_FAILURE = "AuthFailure"
    INDIRECT_TYPE_MISMATCH = "IndirectTypeMismatch"
    TABLE_OUT_OF_BOUNDS = "TableOutOfBounds"
    UNREACHABLE = "Unreachable"
    STACK_OVERFLOW = "StackOverflow"
    INVALID_FREE = "InvalidFree"

    ALL = (
        TAG_MISMATCH, UNALIGNED, OUT_OF_BOUNDS, AUTH_FAILURE, INDIRECT_TYPE_MISMATCH,
        TABLE_OUT_OF_BOUNDS, UNREACHABLE, STACK_OVERFLOW, INVALID_FREE,
    )


class Trap(Exception):
    def __init__(self, kind: str, msg: str = "", address: Optional[int] = None,
                 func: Optional[str] = None, index: Optional[int] = None):
        super().__init__(msg or kind)
        self.kind = kind
        self.msg = msg
        self.address = address
        self.func = func
        self.index = index

    def __str__(self) -> str:
        where = f"{self.func}:{self.index}" if self.func is not None else "host"
        s = f"{self.kind} at {where}"
        if self.address is not None:
            s += f" (address {self.address:#x})"
        return s


class FuelExhausted(Exception):
    pass


@dataclass
class Instance:
    module: "Module"
    index: int
    base: int  # arena offset of linear memory
    mem_len: int
    base_tag: int  # sandbox bits OR-ed into every expected tag
    ambient: int  # tag of untagged guest memory
    modifier: int
    globals: list
    global_names: dict
    stack_base: int
    stack_top: int
    heap: Any = None
    funcs: dict = field(default_factory=dict)

    def export(self, name: str) -> str:
        return self.module.exports[name]


def guest_pointer(rt: "Runtime", inst: Instance, idx: int) -> tuple[int, int]:
    """(address bits, expected granule tag) of a guest index, after masking."""
    masked = mask_index(idx, rt.mode)
    if masked & NONCANONICAL_MASK:
        raise Trap("OutOfBounds", "non-canonical or signed pointer", address=idx)
    return masked & ADDR_MASK, tag_of(masked) | inst.base_tag


def effective_access(rt: "Runtime", inst: Instance, idx: int, offset: int, size: int):
    """Physical arena address and expected tag (None when unchecked) for an access."""
    addr, tag = guest_pointer(rt, inst, idx)
    ea = addr + offset
    mode = rt.mode
    if not mode.external:
        rt.stats.bounds_checks += 1
        if ea + size > inst.mem_len:
            raise Trap("OutOfBounds", address=ea)
    phys = inst.base + ea
    if phys + size > len(rt.store):
        raise Trap("OutOfBounds", address=ea)
    return phys, (tag if mode.tagged else None)


def _check_tag(rt: "Runtime", phys: int, size: int, tag, ea: int):
    if tag is None:
        return
    rt.stats.tag_checks += 1
    if not rt.store.matches(phys, size, tag):
        rt.stats.tag_failures += 1
        raise Trap("TagMismatch", address=ea)


def exec_load(rt: "Runtime", inst: Instance, idx: int, offset: int, width: int) -> int:
    phys, tag = effective_access(rt, inst, idx, offset, width)
    _check_tag(rt, phys, width, tag, phys - inst.base)
    return int.from_bytes(rt.store.mem[phys:phys + width], "little")


def exec_store(rt: "Runtime", inst: Instance, idx: int, offset: int, width: int, value: int):
    phys, tag = effective_access(rt, inst, idx, offset, width)
    _check_tag(rt, phys, width, tag, phys - inst.base)
    rt.store.mem[phys:phys + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")


def _segment(rt: "Runtime", inst: Instance, k: int, length: int, o: int) -> tuple[int, int, int]:
    """Validate a segment operand; return (guest address, physical address, expected tag)."""
    addr, tag = guest_pointer(rt, inst, k)
    start = addr + o
    if start % GRANULE or length % GRANULE:
        raise Trap("Unaligned", address=start)
    if start + length > inst.mem_len:
        raise Trap("OutOfBounds", address=start)
    return start, inst.base + start, tag


def exec_segment_new(rt: "Runtime", inst: Instance, k: int, length: int, o: int) -> int:
    start, phys, _ = _segment(rt, inst, k, length, o)
    result = rt.pool.new_tag((k + o) & MASK64)
    if length:
        rt.store.set(phys, length, tag_of(result))
        rt.store.mem[phys:phys + length] = bytes(length)
    return result


def exec_segment_set_tag(rt: "Runtime", inst: Instance, k: int, t: int, length: int, o: int):
    start, phys, _ = _segment(rt, inst, k, length, o)
    tag = tag_of(mask_index(t, rt.mode)) | inst.base_tag
    if length:
        rt.store.set(phys, length, tag)


def exec_segment_free(rt: "Runtime", inst: Instance, k: int, length: int, o: int):
    start, phys, tag = _segment(rt, inst, k, length, o)
    if length:
        rt.stats.tag_checks += 1
        if not rt.store.matches(phys, length, tag):
            rt.stats.tag_failures += 1
            raise Trap("TagMismatch", "segment freed twice or through a foreign pointer",
                       address=start)
        rt.store.set(phys, length, rt.pool.next_cycle(tag))


def exec_pointer_sign(rt: "Runtime", inst: Instance, k: int) -> int:
    return pac.sign(k, rt.key, inst.modifier)


def exec_pointer_auth(rt: "Runtime", inst: Instance, k: int) -> int:
    try:
        return pac.authenticate(k, rt.key, inst.modifier)
    except pac.AuthTrap:
        raise Trap("AuthFailure", f"pointer {k:#018x} failed authentication") from None


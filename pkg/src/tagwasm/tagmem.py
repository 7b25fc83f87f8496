"""Software memory tagging: pointer tag codec, granule tag store, tag pools."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRANULE = 16
ADDR_BITS = 48
ADDR_MASK = (1 << ADDR_BITS) - 1
TAG_SHIFT = 56
TAG_MASK = 0xF << TAG_SHIFT
MASK64 = (1 << 64) - 1
# Signature field: bits 63..60 and 54..49.
PAC_MASK = (0xF << 60) | (0x3F << 49)
# Bits that must be clear in a pointer used to address memory.
NONCANONICAL_MASK = MASK64 & ~ADDR_MASK & ~TAG_MASK


class TagError(Exception):
    pass


class OutOfBounds(TagError):
    pass


class Unaligned(TagError):
    pass


class HeterogeneousTags(TagError):
    pass


@dataclass(frozen=True)
class Mode:
    internal: bool = False
    external: bool = False
    ptr_auth: bool = False

    @property
    def baseline(self) -> bool:
        return not (self.internal or self.external or self.ptr_auth)

    @property
    def combined(self) -> bool:
        return self.internal and self.external

    @property
    def tagged(self) -> bool:
        """Whether memory accesses are tag-checked."""
        return self.internal or self.external

    @classmethod
    def parse(cls, spec: str) -> "Mode":
        names = {s.strip() for s in spec.replace("+", ",").split(",") if s.strip()}
        names.discard("baseline")
        unknown = names - {"internal", "external", "ptrauth"}
        if unknown:
            raise ValueError(f"unknown mode(s): {', '.join(sorted(unknown))}")
        return cls("internal" in names, "external" in names, "ptrauth" in names)

    def __str__(self) -> str:
        parts = [n for n, on in (("internal", self.internal), ("external", self.external),
                                 ("ptrauth", self.ptr_auth)) if on]
        return ",".join(parts) or "baseline"


def encode(address: int, tag: int) -> int:
    if not 0 <= address <= ADDR_MASK:
        raise ValueError(f"address {address:#x} exceeds 48 bits")
    if not 0 <= tag <= 0xF:
        raise ValueError(f"tag {tag} exceeds 4 bits")
    return (tag << TAG_SHIFT) | address


def tag_of(p: int) -> int:
    return (p >> TAG_SHIFT) & 0xF


def address_of(p: int) -> int:
    return p & ADDR_MASK


def with_tag(p: int, tag: int) -> int:
    return (p & ~TAG_MASK & MASK64) | (tag << TAG_SHIFT)


def mask_index(idx: int, mode: Mode) -> int:
    """Clear the tag bits a guest may not control before address computation."""
    if mode.combined:
        return idx & ~(1 << TAG_SHIFT) & MASK64
    if mode.external:
        return idx & ~TAG_MASK & MASK64
    return idx


class TagStore:
    """Byte arena plus one 4-bit tag per 16-byte granule."""

    def __init__(self, arena_bytes: int):
        if arena_bytes <= 0 or arena_bytes % GRANULE:
            raise ValueError("arena size must be a positive multiple of 16")
        self.mem = bytearray(arena_bytes)
        self.tags = bytearray(arena_bytes // GRANULE)

    def __len__(self) -> int:
        return len(self.mem)

    @property
    def tag_storage_bytes(self) -> int:
        # Two 4-bit tags pack into one byte.
        return len(self.mem) // 32

    def _check_range(self, addr: int, length: int):
        if addr < 0 or length < 0 or addr + length > len(self.mem):
            raise OutOfBounds(f"[{addr:#x}, {addr + length:#x}) outside arena")

    def get(self, addr: int, length: int) -> int:
        """Tag shared by every granule touching ``[addr, addr+length)``."""
        if length < 1:
            raise ValueError("length must be >= 1")
        self._check_range(addr, length)
        g0, g1 = addr // GRANULE, (addr + length - 1) // GRANULE
        first = self.tags[g0]
        if g1 > g0 and self.tags.count(first, g0, g1 + 1) != g1 - g0 + 1:
            raise HeterogeneousTags(f"mixed tags in [{addr:#x}, {addr + length:#x})")
        return first

    def matches(self, addr: int, length: int, tag: int) -> bool:
        """True iff every granule touching the range carries ``tag``; range must be in bounds."""
        g0, g1 = addr // GRANULE, (addr + length - 1) // GRANULE
        if g0 == g1:
            return self.tags[g0] == tag
        return self.tags.count(tag, g0, g1 + 1) == g1 - g0 + 1

    def set(self, addr: int, length: int, tag: int):
        if addr % GRANULE or length % GRANULE:
            raise Unaligned(f"segment [{addr:#x}, +{length}) not 16-byte aligned")
        self._check_range(addr, length)
        if not 0 <= tag <= 0xF:
            raise ValueError(f"tag {tag} exceeds 4 bits")
        g0 = addr // GRANULE
        n = length // GRANULE
        self.tags[g0:g0 + n] = bytes([tag]) * n

    def tag_array(self) -> np.ndarray:
        return np.frombuffer(self.tags, dtype=np.uint8)

    def count_not(self, tag: int) -> int:
        return int(np.count_nonzero(self.tag_array() != tag))

    def snapshot(self) -> tuple[bytes, bytes]:
        return bytes(self.mem), bytes(self.tags)

    def dump(self, ambient: int = 0) -> str:
        """``granule_index hex_tag`` lines for every non-ambient granule."""
        tags = self.tag_array()
        idx = np.flatnonzero(tags != ambient)
        return "".join(f"{i} {tags[i]:x}\n" for i in idx)


def parse_dump(text: str) -> dict[int, int]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            g, t = line.split()
            out[int(g)] = int(t, 16)
    return out


class TagPool:
    """Tags available to guest allocations, drawn from a seeded stream."""

    def __init__(self, allowed, ambient: int, rng: np.random.Generator):
        allowed = tuple(allowed)
        if ambient in allowed:
            raise ValueError("ambient tag must not be allocatable")
        self.allowed = allowed
        self.ambient = ambient
        self.rng = rng
        self._pos = {t: i for i, t in enumerate(allowed)}

    @classmethod
    def for_mode(cls, mode: Mode, rng: np.random.Generator) -> "TagPool":
        if mode.combined:
            # Bit 56 marks guest memory; bits 57..59 carry the internal tag.
            return cls(range(3, 16, 2), 1, rng)
        return cls(range(1, 16), 0, rng)

    @property
    def step(self) -> int:
        return self.allowed[1] - self.allowed[0]

    def draw(self) -> int:
        return self.allowed[int(self.rng.integers(len(self.allowed)))]

    def next_cycle(self, tag: int) -> int:
        if tag == self.ambient:
            return self.allowed[0]
        return self.allowed[(self._pos[tag] + 1) % len(self.allowed)]

    def new_tag(self, p: int) -> int:
        return with_tag(p, self.draw())

    def free_tag(self, p: int) -> int:
        return with_tag(p, self.next_cycle(tag_of(p)))

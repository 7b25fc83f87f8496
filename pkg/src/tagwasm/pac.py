"""Software pointer authentication with 10-bit signatures.

The keyed function is a SplitMix64-style finalizer chain. It is
deterministic and well mixed but not a cryptographic MAC; it stands in
for the hardware cipher so that signatures are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tagmem import MASK64, PAC_MASK

SIG_BITS = 10


class AuthTrap(Exception):
    pass


@dataclass(frozen=True)
class SigningKey:
    k0: int
    k1: int

    def __repr__(self) -> str:
        return "SigningKey(<hidden>)"


def mix(x: int) -> int:
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & MASK64
    x ^= x >> 31
    return x


def prf(payload: int, key: SigningKey, modifier: int) -> int:
    v = mix(payload ^ key.k0)
    v = mix(v ^ ((modifier + key.k1) & MASK64))
    return v & ((1 << SIG_BITS) - 1)


def place(sig: int) -> int:
    """Spread a 10-bit signature over bits 54..49 (low six) and 63..60 (high four)."""
    return ((sig & 0x3F) << 49) | ((sig >> 6) << 60)


def extract(p: int) -> int:
    return ((p >> 49) & 0x3F) | (((p >> 60) & 0xF) << 6)


def strip(p: int) -> int:
    return p & ~PAC_MASK & MASK64


def sign(p: int, key: SigningKey, modifier: int) -> int:
    payload = strip(p)
    return payload | place(prf(payload, key, modifier))


def authenticate(p: int, key: SigningKey, modifier: int) -> int:
    payload = strip(p)
    if sign(payload, key, modifier) != p:
        raise AuthTrap(f"bad signature on {p:#018x}")
    return payload

# %% [markdown]
# # Signed function pointers
#
# `i64.pointer_sign` packs a 10-bit keyed signature into unused pointer
# bits; `i64.pointer_auth` checks and strips it. The key belongs to the
# runtime and the modifier to the instance, so a pointer signed by one
# guest does not authenticate in another.

# %%
from tagwasm import Runtime, RuntimeConfig, parse
from tagwasm.pac import AuthTrap, authenticate, extract, sign

rt = Runtime(RuntimeConfig(mode="ptrauth,external", seed=5))
a = rt.add_instance(parse("(module (memory 1))"))
b = rt.add_instance(parse("(module (memory 1))"))

p = 3  # a table index, as funcptr.make produces
s = sign(p, rt.key, a.modifier)
print(f"signed {p} -> {s:#018x} (signature {extract(s):#05x})")
print("authenticates in A:", authenticate(s, rt.key, a.modifier))


def tries(ptr, mod) -> str:
    try:
        return f"ok -> {authenticate(ptr, rt.key, mod)}"
    except AuthTrap:
        return "AuthFailure"


print("in B:", tries(s, b.modifier))
print("bit 60 flipped:", tries(s ^ (1 << 60), a.modifier))
print("raw index, never signed:", tries(p, a.modifier))

# %% [markdown]
# The corpus program `funcptr_overwrite` stores a raw table index over a
# signed pointer held in memory. Without pointer authentication the call
# goes through; with it the forged pointer is rejected at the call site.

# %%
from pathlib import Path

from tagwasm import Trap

src = parse((Path(__file__).resolve().parent.parent / "corpus" / "funcptr_overwrite.cwat").read_text())
for mode in ("", "ptrauth"):
    r = Runtime(RuntimeConfig(mode=mode, seed=7))
    try:
        print(f"[{mode or 'baseline'}] main ->", r.invoke(r.add_instance(src), "main"))
    except Trap as t:
        print(f"[{mode or 'baseline'}] {t}")

# %% [markdown]
# # Heap layout under internal memory safety
#
# `malloc` hands out granule-aligned payloads, each with a fresh tag and
# an untagged header in front. `free` retags the payload so dangling
# pointers stop matching. The tag map below shows one granule per
# character: `.` for ambient, a hex digit otherwise.

# %%
from tagwasm import Runtime, RuntimeConfig, Trap, parse
from tagwasm.semantics import exec_load
from tagwasm.tagmem import ADDR_MASK

rt = Runtime(RuntimeConfig(mode="internal", seed=3))
inst = rt.add_instance(parse("(module (memory 1))"))
heap = inst.heap


def show(label: str, n: int = 24):
    g0 = (inst.base + heap.start) // 16
    row = "".join("." if t == inst.ambient else f"{t:x}" for t in rt.store.tags[g0:g0 + n])
    print(f"{label:<22} {row}")


show("empty heap")
p, q, r = heap.malloc(24), heap.malloc(40), heap.malloc(8)
show("three blocks")
heap.free(q)
show("middle one freed")

# %%
for label, ptr, off in [("p in bounds", p, 16), ("p one past end", p, 32), ("q after free", q, 0)]:
    try:
        exec_load(rt, inst, ptr, off, 1)
        print(f"{label}: ok")
    except Trap as t:
        print(f"{label}: {t.kind} at {t.address:#x}")
print("payload addresses:", [hex(x & ADDR_MASK) for x in (p, q, r)])

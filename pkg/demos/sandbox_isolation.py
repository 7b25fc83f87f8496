# %% [markdown]
# # Two guests, one arena
#
# In external mode every guest gets its own sandbox tag and no bounds
# checks are emitted: a stray access lands on memory carrying someone
# else's tag and traps. Guests also cannot forge the sandbox bits, since
# they are masked off before the address is formed.

# %%
import numpy as np

from tagwasm import Runtime, RuntimeConfig, Trap, parse
from tagwasm.semantics import exec_load, exec_store
from tagwasm.tagmem import Mode, mask_index

GUEST = '(module (memory 1) (func $nop) (export "nop" $nop))'

rt = Runtime(RuntimeConfig(mode="external", seed=1, arena_bytes=1 << 20))
a, b = rt.add_instance(parse(GUEST)), rt.add_instance(parse(GUEST))
for g in (a, b):
    print(f"guest {g.index}: arena [{g.base:#x}, {g.base + g.mem_len:#x}) sandbox tag {g.base_tag}")

# %% [markdown]
# Guest A writes inside its own memory, then tries to reach guest B by
# walking past its end, and by injecting B's tag into the pointer.

# %%
exec_store(rt, a, 0x100, 0, 8, 42)
print("A reads its own word:", exec_load(rt, a, 0x100, 0, 8))
for label, idx in [("past the end", a.mem_len), ("forged tag", (b.base_tag << 56) | 0x100),
                   ("runtime region", -a.base & ((1 << 64) - 1))]:
    try:
        v = exec_load(rt, a, idx, 0, 8)
        print(f"{label}: tag bits masked, read A's own word {v}")
    except Trap as t:
        print(f"{label}: {t.kind}")

# %% [markdown]
# A burst of random indices: count how many accesses the guest managed
# to land outside its own region (expected zero).

# %%
rng = np.random.default_rng(0)
outside = traps = 0
for _ in range(20_000):
    idx = int(rng.integers(0, 4 * a.mem_len)) | (int(rng.integers(0, 16)) << 56)
    try:
        exec_store(rt, a, idx, 0, 1, 0xFF)
        phys = a.base + mask_index(idx, rt.mode) % (1 << 48)
        outside += not (a.base <= phys < a.base + a.mem_len)
    except Trap:
        traps += 1
print(f"traps {traps}, escapes {outside}")
print("combined-mode masking clears only bit 56:",
      hex(mask_index(0xF << 56, Mode(internal=True, external=True))))

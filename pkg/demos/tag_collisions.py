# %% [markdown]
# # How often do two allocations share a tag?
#
# A pointer to one allocation can reach another only if the two happen
# to carry the same tag. With 15 allocatable tags that is 1 in 15; when
# one tag bit is spent on sandboxing only 7 remain.

# %%
from tagwasm import Runtime, RuntimeConfig, parse
from tagwasm.tagmem import tag_of

GUEST = "(module (memory 1))"


def collision_rate(mode: str, pairs: int = 20_000) -> float:
    rt = Runtime(RuntimeConfig(mode=mode, seed=11))
    heap = rt.add_instance(parse(GUEST)).heap
    same = 0
    for _ in range(pairs):
        p, q = heap.malloc(48), heap.malloc(48)
        same += tag_of(p) == tag_of(q)
        heap.free(p)
        heap.free(q)
    return same / pairs


# %%
for mode, expect in [("internal", 1 / 15), ("internal,external", 1 / 7)]:
    print(f"{mode:<18} measured {collision_rate(mode):.4f}   expected {expect:.4f}")

# %% [markdown]
# Adjacent blocks never collide in practice, whatever the draw: the
# allocator leaves an ambient header granule between payloads, so a
# linear overflow hits the header first.

# %% [markdown]
# # Fast interpreter vs. small-step reference
#
# The reference evaluator rewrites an explicit configuration one rule at
# a time and is slow but easy to audit. Here both engines run the same
# randomly generated modules and must agree on results, trap kinds and
# the final memory and tag state.

# %%
from collections import Counter

from tagwasm import Runtime, RuntimeConfig, Trap
from tagwasm.randmod import random_module
from tagwasm.reference import reference_instantiate

MODES = ["", "internal", "external", "ptrauth", "internal,external,ptrauth"]


def outcome(fn):
    try:
        return fn()
    except Trap as t:
        return t.kind


kinds, disagreements = Counter(), 0
for seed in range(200):
    mode = MODES[seed % len(MODES)]
    m = random_module(seed, mode)
    fast = Runtime(RuntimeConfig(mode=mode, seed=seed))
    a = outcome(lambda: fast.invoke(fast.add_instance(m), "main"))
    ref = Runtime(RuntimeConfig(mode=mode, seed=seed))
    b = outcome(lambda: reference_instantiate(ref.prepare(m), ref).invoke("main"))
    disagreements += a != b or fast.store.snapshot() != ref.store.snapshot()
    kinds[a if isinstance(a, str) else "ok"] += 1

print("disagreements:", disagreements)
for k, n in kinds.most_common():
    print(f"  {k:<16} {n}")

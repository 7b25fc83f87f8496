# %% [markdown]
# # Detection matrix
#
# Each vulnerable corpus program runs twice: once with no protection and
# once under the mode meant to catch its bug class. Baseline runs finish
# and return a (wrong or leaked) value; protected runs stop with a trap.

# %%
from pathlib import Path

from tagwasm import Runtime, RuntimeConfig, Trap, parse

CORPUS = Path(__file__).resolve().parent.parent / "corpus"
CASES = {
    "heap_oob_read": "internal",
    "heap_oob_write": "internal",
    "stack_overflow": "internal",
    "uaf": "internal",
    "double_free": "internal",
    "use_after_return": "internal",
    "funcptr_overwrite": "ptrauth",
}


def run(name: str, mode: str) -> str:
    rt = Runtime(RuntimeConfig(mode=mode, seed=7))
    inst = rt.add_instance(parse((CORPUS / f"{name}.cwat").read_text()))
    try:
        return f"returned {rt.invoke(inst, 'main')}"
    except Trap as t:
        return f"trap {t.kind}"


# %%
print(f"{'program':<20} {'baseline':<22} protected")
for name, mode in CASES.items():
    print(f"{name:<20} {run(name, ''):<22} [{mode}] {run(name, mode)}")

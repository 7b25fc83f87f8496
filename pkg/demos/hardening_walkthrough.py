# %% [markdown]
# # What the hardening pass does to a function
#
# Stack slots are declared with `(frame $name size)` and addressed with
# `frame.addr`. The pass decides which slots can be reached out of
# bounds or escape, tags only those, and brackets the frame with a
# prologue and epilogue that retag the memory back on exit.

# %%
from pathlib import Path

from tagwasm import harden_with_report, parse, serialize
from tagwasm.harden import classify_slots

src = parse((Path(__file__).resolve().parent.parent / "corpus" / "stack_overflow.cwat").read_text())
fill = src.func("fill")
for name, info in classify_slots(fill, src).items():
    print(f"slot {name}: {'instrumented' if info.instrument else 'left untagged'}")

# %%
hardened, report = harden_with_report(src, stack_safety=True)
r = report.functions["fill"]
print(f"frame {r.frame_size} bytes, tagged slots {r.instrumented}, guard slot: {r.guard}")
print(serialize(hardened))

# %% [markdown]
# The same pass lowers function pointers. With pointer auth enabled
# each `funcptr.make` is followed by a sign and each `funcptr.call` is
# preceded by an authenticate.

# %%
dispatch = parse((Path(__file__).resolve().parent.parent / "corpus" / "dispatch.cwat").read_text())
signed, _ = harden_with_report(dispatch, ptr_auth=True)
for ins in signed.func("main").body[:12]:
    print("  ", ins.op, *ins.args)

"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (shown even
without ``-s``) and then asserts.
"""

from __future__ import annotations

import random
import time
from pathlib import Path

import numpy as np
import pytest

from tagwasm import FeatureSet, Trap, harden_with_report, parse, validate
from tagwasm.harden import frame_layout
from tagwasm.module import FrameSlot, Function
from tagwasm.pac import AuthTrap, SIG_BITS, authenticate, extract, place, sign, strip
from tagwasm.randmod import random_module
from tagwasm.reference import reference_instantiate
from tagwasm.semantics import effective_access, exec_load, exec_store
from tagwasm.tagmem import ADDR_MASK, Mode, mask_index, tag_of

from conftest import MEM1, make_runtime, outcome

CORPUS = Path(__file__).resolve().parent.parent / "corpus"
pytestmark = pytest.mark.slow

MODES = ["", "internal", "external", "ptrauth", "internal,external", "internal,ptrauth",
         "external,ptrauth", "internal,external,ptrauth"]


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


def _outcome_pair(m, mode, seed, fast_steps=None):
    fast = make_runtime(mode, seed, **({"max_steps": fast_steps} if fast_steps else {}))
    a = outcome(lambda: fast.invoke(fast.add_instance(m), "main"))
    ref = make_runtime(mode, seed)
    b = outcome(lambda: reference_instantiate(ref.prepare(m), ref).invoke("main"))
    same_state = fast.store.snapshot() == ref.store.snapshot() and fast.output == ref.output
    return a, b, same_state


def test_criterion_1_semantics_differential(report):
    t0 = time.perf_counter()
    mismatches = []
    programs = sorted(CORPUS.glob("*.cwat"))
    checked = 0
    for p in programs:
        m = parse(p.read_text())
        for mode in MODES:
            try:
                make_runtime(mode).prepare(m)
            except Exception:
                continue  # instructions outside this mode
            a, b, same = _outcome_pair(m, mode, 7)
            checked += 1
            if a != b or not same:
                mismatches.append((p.stem, mode, a, b))
    n_random = 1000
    for seed in range(n_random):
        mode = MODES[seed % len(MODES)]
        a, b, same = _outcome_pair(random_module(seed, mode), mode, seed, fast_steps=10**5)
        if a != b or not same:
            mismatches.append((seed, mode, a, b))
    elapsed = time.perf_counter() - t0
    ok = len(programs) >= 12 and not mismatches and elapsed < 300
    report(1, ok, f"{len(programs)} corpus programs ({checked} program-mode runs) + {n_random} random "
                  f"modules, {len(mismatches)} mismatches, {elapsed:.1f}s")
    assert ok, mismatches[:5]


DETECTION = {
    "heap_oob_read": ("internal", "TagMismatch"),
    "heap_oob_write": ("internal", "TagMismatch"),
    "stack_overflow": ("internal", "TagMismatch"),
    "uaf": ("internal", "TagMismatch"),
    "double_free": ("internal", "TagMismatch"),
    "use_after_return": ("internal", "TagMismatch"),
    "funcptr_overwrite": ("ptrauth", "AuthFailure"),
}


def test_criterion_2_detection_matrix(report):
    rows = []
    for name, (mode, kind) in DETECTION.items():
        m = parse((CORPUS / f"{name}.cwat").read_text())
        base_rt = make_runtime("", 7)
        base = outcome(lambda: base_rt.invoke(base_rt.add_instance(m), "main"))
        rt = make_runtime(mode, 7)
        hard = outcome(lambda: rt.invoke(rt.add_instance(m), "main"))
        rows.append((name, isinstance(base, list), hard == kind, base, hard))
    passed = sum(b and h for _, b, h, _, _ in rows)
    ok = passed == 7
    report(2, ok, f"{passed}/7 classes detected; " +
           ", ".join(f"{n}={h}" for n, _, _, _, h in rows))
    assert ok, rows


def _traps(fn) -> bool:
    try:
        fn()
    except Trap:
        return True
    return False


def test_criterion_3_deterministic_guarantees(report):
    trials = 10_000
    after_end = before_start = after_free = 0
    for seed in range(trials):
        rng = random.Random(seed)
        rt = make_runtime("internal", seed, arena_bytes=256 << 10)
        inst = rt.add_instance(parse(MEM1))
        heap = inst.heap
        live = [heap.malloc(rng.randint(1, 200)) for _ in range(rng.randint(0, 4))]
        for p in live[::2]:
            heap.free(p)
        size = rng.randint(1, 256)
        p = heap.malloc(size)
        block = heap.block_at(p & ADDR_MASK)
        # granule-rounded payload; bytes inside the last granule's padding share its tag
        end = block.size
        after_end += _traps(lambda: exec_load(rt, inst, p, end, 1))
        before_start += _traps(lambda: exec_store(rt, inst, p - 1, 0, 1, 0xAA))
        heap.free(p)
        after_free += _traps(lambda: exec_load(rt, inst, p, rng.randrange(0, size), 1))
    ok = after_end == before_start == after_free == trials
    report(3, ok, f"{trials} trials: payload_end {after_end / trials:.2%}, "
                  f"payload_start-1 {before_start / trials:.2%}, after free {after_free / trials:.2%}")
    assert ok


def _collision_rate(mode: str, pairs: int) -> float:
    rt = make_runtime(mode, 12345)
    inst = rt.add_instance(parse(MEM1))
    heap = inst.heap
    same = 0
    for _ in range(pairs):
        a, b = heap.malloc(32), heap.malloc(32)
        same += tag_of(a) == tag_of(b)
        heap.free(a)
        heap.free(b)
    return same / pairs


def test_criterion_4_collision_statistics(report):
    pairs = 100_000
    internal = _collision_rate("internal", pairs)
    combined = _collision_rate("internal,external", pairs)
    ok = abs(internal - 1 / 15) <= 0.01 and abs(combined - 1 / 7) <= 0.01
    report(4, ok, f"{pairs} pairs: internal {internal:.4f} (1/15={1 / 15:.4f}), "
                  f"combined {combined:.4f} (1/7={1 / 7:.4f})")
    assert ok


def _adversarial_index(rng: np.random.Generator, mem_len: int) -> int:
    r = rng.random()
    if r < 0.4:
        return int(rng.integers(0, mem_len))
    if r < 0.6:
        return int(rng.integers(mem_len - 64, mem_len + 4 * mem_len))
    if r < 0.8:
        # in range with forged sandbox bits
        return int(rng.integers(0, mem_len)) | (int(rng.integers(1, 16)) << 56)
    if r < 0.9:
        return int(rng.integers(0, 1 << 63)) * 2 + int(rng.integers(0, 2))
    return (1 << 64) - int(rng.integers(1, 1 << 20))


def test_criterion_5_sandbox_isolation(report):
    rt = make_runtime("external", 3, arena_bytes=1 << 20)
    guests = [rt.add_instance(parse(MEM1)) for _ in range(2)]
    arena = np.frombuffer(rt.store.mem, dtype=np.uint8)
    rng = np.random.default_rng(99)
    escapes = traps = 0
    per_guest = 100_000
    for g in guests:
        others = np.ones(len(arena), dtype=bool)
        others[g.base:g.base + g.mem_len] = False
        before = arena[others].copy()
        for _ in range(per_guest):
            idx = _adversarial_index(rng, g.mem_len)
            width = (1, 8)[int(rng.integers(0, 2))]
            try:
                phys, _ = effective_access(rt, g, idx, 0, width)
                if rng.random() < 0.5:
                    exec_load(rt, g, idx, 0, width)
                else:
                    exec_store(rt, g, idx, 0, width, int(rng.integers(0, 1 << 63)))
            except Trap:
                traps += 1
                continue
            if not (g.base <= phys and phys + width <= g.base + g.mem_len):
                escapes += 1
        escapes += int(np.count_nonzero(arena[others] != before))
    combined = Mode.parse("internal,external")
    masking_ok = all(
        mask_index(t << 56 | 0x40, Mode(external=True)) == 0x40
        and mask_index(t << 56 | 0x40, combined) == (t & ~1) << 56 | 0x40
        for t in range(16)
    )
    ok = escapes == 0 and masking_ok
    report(5, ok, f"2 guests x {per_guest} accesses: {escapes} out-of-range effects, {traps} traps, "
                  f"masking {'ok' if masking_ok else 'broken'}")
    assert ok


FIELD_BITS = [60, 61, 62, 63, 49, 50, 51, 52, 53, 54]


def test_criterion_6_pointer_authentication(report):
    rng = np.random.default_rng(6)
    rt = make_runtime("ptrauth", 6)
    key = rt.key
    n = 10_000
    identity = forged_traps = forgeries = 0
    for _ in range(n):
        p = int(rng.integers(0, 1 << 63)) * 2 + int(rng.integers(0, 2))
        mod = int(rng.integers(0, 1 << 63))
        s = sign(p, key, mod)
        identity += authenticate(s, key, mod) == strip(p)
        for b in FIELD_BITS:
            forgeries += 1
            try:
                authenticate(s ^ (1 << b), key, mod)
            except AuthTrap:
                forged_traps += 1
    accepted = 0
    for seed in range(n):
        rt2 = make_runtime("ptrauth,external", seed, arena_bytes=512 << 10)
        a, b = (rt2.add_instance(parse(MEM1)) for _ in range(2))
        payload = random.Random(seed).randrange(1 << 16)
        try:
            authenticate(sign(payload, rt2.key, a.modifier), rt2.key, b.modifier)
            accepted += 1
        except AuthTrap:
            pass
    assert SIG_BITS == 10 and all(extract(place(1 << i)) == 1 << i for i in range(10))
    ok = identity == n and forged_traps == forgeries and accepted / n <= 0.005
    report(6, ok, f"identity {identity}/{n}, single-bit forgeries trapped {forged_traps}/{forgeries}, "
                  f"cross-instance acceptance {accepted / n:.4%} (bound 0.5%, ideal {2 ** -10:.4%})")
    assert ok


def test_criterion_7_tag_storage_accounting(report):
    sizes = [1 << 20, 128 << 20]
    got = {}
    for arena in sizes:
        rt = make_runtime("internal", arena_bytes=arena)
        got[arena] = rt.snapshot_stats().tag_storage_bytes
    ok = all(got[a] * 32 == a for a in sizes)
    report(7, ok, ", ".join(f"arena {a >> 20} MiB -> {got[a]} tag bytes ({got[a] / a:.3%})" for a in sizes))
    assert ok


def _slot_fn(sizes):
    return Function("f", 0, frame_slots=[FrameSlot(f"s{i}", n, i) for i, n in enumerate(sizes)])


SAFE_SLOTS = """(module (memory 1)
(func $f (result i64)
(frame $a 16)
(frame $b 8)
frame.addr $a
i64.const 5
i64.store 8
frame.addr $b
i64.load
frame.addr $a
i64.load 8
i64.add
)
(export "f" $f))"""


def test_criterion_8_instrumentation_structure(report):
    rng = random.Random(8)
    rule_cases = 0
    rule_ok = True
    for _ in range(2000):
        sizes = [rng.choice([1, 8, 16, 24, 40]) for _ in range(rng.randint(1, 5))]
        inst = {f"s{i}" for i in range(len(sizes)) if rng.random() < 0.5}
        layout = frame_layout(_slot_fn(sizes), inst)
        expect = bool(inst) and "s0" not in inst
        rule_ok &= (layout.guard is not None) == expect
        rule_cases += 1
    hm, rep = harden_with_report(parse(SAFE_SLOTS), stack_safety=True)
    added = sum(i.op.startswith("segment.") for f in hm.functions for i in f.body)
    revalidated = 0
    for seed in range(500):
        mode = Mode.parse(MODES[seed % len(MODES)])
        m = random_module(seed, mode)
        for stack, pa in ((True, False), (False, True), (True, True)):
            validate(harden_with_report(m, stack_safety=stack, ptr_auth=pa)[0],
                     FeatureSet(segments=stack or mode.internal, pointer_auth=pa or mode.ptr_auth,
                                pseudo=False))
            revalidated += 1
    for p in sorted(CORPUS.glob("*.cwat")):
        m = parse(p.read_text())
        validate(harden_with_report(m, stack_safety=True, ptr_auth=True)[0],
                 FeatureSet(pseudo=False))
        revalidated += 1
    ok = rule_ok and rep.instrumented == 0 and added == 0
    report(8, ok, f"guard rule on {rule_cases} layouts, safe-slot program adds {added} segment ops, "
                  f"{revalidated} hardened modules revalidated")
    assert ok


def call_tree_module(seed: int) -> str:
    """Random functions with stack slots (some escaping) calling later functions."""
    rng = random.Random(seed)
    n = rng.randint(2, 5)
    funcs = []
    for i in range(n):
        lines = [f"(func $f{i} (param i64) (result i64) (local i64)"]
        slots = [(f"s{j}", rng.choice([8, 16, 24, 32])) for j in range(rng.randint(1, 3))]
        lines += [f"(frame ${s} {size})" for s, size in slots]
        for s, size in slots:
            if rng.random() < 0.5:
                lines += [f"frame.addr ${s}", "local.get 0", "call $sink"]  # escapes
            else:
                lines += [f"frame.addr ${s}", f"i64.const {i}", "i64.store"]
        if rng.random() < 0.3:
            lines += ["local.get 0", f"i64.const {rng.randint(0, 9)}", "i64.lt_u", "if",
                      "i64.const 1", "return", "end"]
        lines += ["i64.const 0", "local.set 1"]
        for _ in range(rng.randint(0, 2) if i + 1 < n else 0):
            callee = rng.randint(i + 1, n - 1)
            lines += ["local.get 0", "i64.const 1", "i64.add", f"call $f{callee}",
                      "local.get 1", "i64.add", "local.set 1"]
        s, _ = slots[0]
        lines += [f"frame.addr ${s}", "i64.load", "local.get 1", "i64.add", ")"]
        funcs.append("\n".join(lines))
    sink = "(func $sink (param i64 i64)\nlocal.get 0\nlocal.get 1\ni64.store\n)"
    return ("(module (memory 1)\n" + sink + "\n" + "\n".join(funcs)
            + '\n(export "main" $f0))')


def test_criterion_9_frame_hygiene(report):
    trees = 1000
    dirty = instrumented = 0
    for seed in range(trees):
        mode = ("internal", "internal,external")[seed % 2]
        rt = make_runtime(mode, seed, arena_bytes=256 << 10)
        m = parse(call_tree_module(seed))
        instrumented += harden_with_report(m, stack_safety=True)[1].instrumented
        inst = rt.add_instance(m)
        before = rt.store.tag_array().copy()
        rt.invoke(inst, "main", seed % 10)
        dirty += not np.array_equal(before, rt.store.tag_array())
    ok = dirty == 0 and instrumented > 0
    report(9, ok, f"{trees} call trees ({instrumented} instrumented slots), "
                  f"{dirty} left stack tags behind")
    assert ok

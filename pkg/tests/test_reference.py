from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from tagwasm import Trap, parse
from tagwasm.module import Instr
from tagwasm.randmod import random_module
from tagwasm.reference import Block, If, Label, Loop, ReferenceMachine, reference_instantiate, structure

from conftest import make_runtime, outcome

CORPUS = Path(__file__).resolve().parent.parent / "corpus"
MODES = ["", "internal", "external", "ptrauth", "internal,external", "internal,ptrauth",
         "external,ptrauth", "internal,external,ptrauth"]


def both(m, mode: str, seed: int, export: str = "main", args=()):
    """(fast outcome, reference outcome, fast runtime, reference runtime)."""
    fast = make_runtime(mode, seed)
    a = outcome(lambda: fast.invoke(fast.add_instance(m), export, *args))
    ref = make_runtime(mode, seed)
    b = outcome(lambda: reference_instantiate(ref.prepare(m), ref).invoke(export, args))
    return a, b, fast, ref


def test_structure_nests_blocks():
    body = [Instr(op, args) for op, args in [
        ("block", ("i64",)), ("i64.const", (1,)), ("end", ()),
        ("i32.const", (0,)), ("if", ()), ("nop", ()), ("else", ()), ("loop", ()), ("end", ()),
        ("end", ()),
    ]]
    tree = structure(body)
    assert tree[0] == Block(1, (Instr("i64.const", (1,)),))
    assert tree[1] == Instr("i32.const", (0,))
    assert tree[2] == If(0, (Instr("nop"),), (Loop(0, ()),))


def test_single_steps_of_a_block():
    m = parse("(module (func $f (result i64)\nblock (result i64)\ni64.const 4\nend\n)\n(export \"f\" $f))")
    rt = make_runtime("")
    machine = reference_instantiate(rt.prepare(m), rt)
    f = machine.bodies["f"]
    seq = machine.step(list(f), None, 0)
    assert isinstance(seq[0], Label) and seq[0].body == [Instr("i64.const", (4,))]
    seq = machine.step(seq, None, 0)
    assert seq[0].body == [4]
    assert machine.step(seq, None, 0) == [4]


@pytest.mark.parametrize("path", sorted(CORPUS.glob("*.cwat")), ids=lambda p: p.stem)
@pytest.mark.parametrize("mode", ["", "internal", "ptrauth", "internal,external,ptrauth"])
def test_corpus_differential(path, mode):
    m = parse(path.read_text())
    fast = make_runtime(mode, 7)
    try:
        fast.prepare(m)
    except Exception:
        pytest.skip("module uses instructions this mode does not enable")
    a, b, fast, ref = both(m, mode, 7)
    assert a == b
    assert fast.store.snapshot() == ref.store.snapshot()
    assert fast.output == ref.output


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 10**7), st.sampled_from(MODES))
def test_random_differential(seed, mode):
    m = random_module(seed, mode)
    a, b, fast, ref = both(m, mode, seed)
    assert a == b
    assert fast.store.snapshot() == ref.store.snapshot()


def test_segment_new_draw_matches_fast_engine():
    text = """(module (memory 1)
(func $f (result i64)
i64.const 64
i64.const 32
segment.new
)
(export "f" $f))"""
    m = parse(text)
    for seed in range(20):
        a, b, _, _ = both(m, "internal", seed, "f")
        assert a == b


def test_reference_traps_carry_kind():
    m = parse((CORPUS / "uaf.cwat").read_text())
    rt = make_runtime("internal", 7)
    machine = reference_instantiate(rt.prepare(m), rt)
    with pytest.raises(Trap) as ei:
        machine.invoke("main")
    assert ei.value.kind == "TagMismatch"


def test_function_arguments():
    m = parse((CORPUS / "fib.cwat").read_text())
    for n in (0, 1, 7):
        a, b, _, _ = both(m, "", 0, "fib", (n,))
        assert a == b


def test_no_stuck_states_on_random_modules():
    # run() raises AssertionError if a Breaking/Returning reaches the top level
    for seed in range(60):
        m = random_module(seed, "internal,ptrauth")
        rt = make_runtime("internal,ptrauth", seed)
        machine = ReferenceMachine(rt, rt.add_instance(m))
        try:
            out = machine.invoke("main")
            assert all(isinstance(v, int) for v in out)
        except Trap:
            pass

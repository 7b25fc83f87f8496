from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from tagwasm import FeatureError, FeatureSet, Mode, ValidationError, parse, validate
from tagwasm.randmod import random_module
from tagwasm.validate import gated_instructions

CORPUS = Path(__file__).resolve().parent.parent / "corpus"


def body(instrs: str, sig: str = "", memory: bool = True, locals_: str = "") -> str:
    mem = "(memory 1)" if memory else ""
    loc = f"(local {locals_})" if locals_ else ""
    lines = "\n".join(s.strip() for s in instrs.strip().splitlines())
    return f"(module {mem}\n(func $f {sig} {loc}\n{lines}\n))"


def check(text: str, features: FeatureSet = FeatureSet()):
    return validate(parse(text), features)


@pytest.mark.parametrize("path", sorted(CORPUS.glob("*.cwat")), ids=lambda p: p.stem)
def test_corpus_validates(path):
    validate(parse(path.read_text()))


@pytest.mark.parametrize("instrs, sig", [
    ("i64.const 0\ni64.const 16\nsegment.new\ndrop", ""),
    ("i64.const 0\ni64.const 0\ni64.const 16\nsegment.set_tag", ""),
    ("i64.const 0\ni64.const 16\nsegment.free", ""),
    ("i64.const 5\ni64.pointer_sign\ni64.pointer_auth", "(result i64)"),
])
def test_new_instruction_typing(instrs, sig):
    check(body(instrs, sig))


@pytest.mark.parametrize("instrs", [
    "i32.const 0\ni64.const 16\nsegment.new\ndrop",  # pointer must be i64
    "i64.const 0\nsegment.new\ndrop",  # missing length
    "i64.const 0\ni64.const 0\ni64.const 16\nsegment.set_tag\ndrop",  # produces nothing
    "i64.const 0\ni64.const 16\nsegment.free\ndrop",
    "i32.const 1\ni64.pointer_sign\ndrop",
])
def test_new_instruction_type_errors(instrs):
    with pytest.raises(ValidationError):
        check(body(instrs))


@pytest.mark.parametrize("op", ["segment.new", "segment.free"])
def test_segments_need_memory(op):
    text = body(f"i64.const 0\ni64.const 16\n{op}\n" + ("drop" if op == "segment.new" else "nop"),
                memory=False)
    with pytest.raises(ValidationError, match="declared memory"):
        check(text)


def test_pointer_auth_needs_no_memory():
    check(body("i64.const 1\ni64.pointer_sign\ndrop", memory=False))


@pytest.mark.parametrize("mode, instrs, ok", [
    ("", "i64.const 0\ni64.const 16\nsegment.free", False),
    ("internal", "i64.const 0\ni64.const 16\nsegment.free", True),
    ("external", "i64.const 0\ni64.const 16\nsegment.free", False),
    ("", "i64.const 1\ni64.pointer_sign\ndrop", False),
    ("ptrauth", "i64.const 1\ni64.pointer_sign\ndrop", True),
    ("internal", "i64.const 1\ni64.pointer_auth\ndrop", False),
])
def test_feature_gates(mode, instrs, ok):
    feats = FeatureSet.from_mode(Mode.parse(mode))
    if ok:
        check(body(instrs), feats)
    else:
        with pytest.raises(FeatureError):
            check(body(instrs), feats)


def test_pseudo_ops_rejected_when_lowering_required():
    text = "(module (memory 1)\n(func $f (result i64)\n(frame $a 8)\nframe.addr $a\n))"
    check(text)
    with pytest.raises(FeatureError, match="lowered"):
        check(text, FeatureSet(pseudo=False))


def test_gated_instructions_lists_every_site():
    m = parse((CORPUS / "segments.cwat").read_text())
    gated = gated_instructions(m, FeatureSet.from_mode(Mode()))
    assert [e.index for e in gated] == [2, 6, 11, 21]
    assert gated_instructions(m, FeatureSet.from_mode(Mode(internal=True))) == []


def test_polymorphic_stack_after_unreachable():
    check(body("unreachable\ni64.add", "(result i64)"))
    check(body("i64.const 1\nreturn\nsegment.new", "(result i64)"))
    check(body("block (result i64)\ni64.const 1\nbr 0\ni64.add\nend", "(result i64)"))
    with pytest.raises(ValidationError):
        check(body("block (result i64)\ni64.const 1\nbr 0\ni32.add\nend", "(result i64)"))


@pytest.mark.parametrize("instrs, sig, fragment", [
    ("i64.const 1\ni32.const 1\ni64.add", "(result i64)", "type mismatch"),
    ("i64.add", "(result i64)", "underflow"),
    ("i64.const 1\ni64.const 2", "(result i64)", "leftover"),
    ("i32.const 1\nif (result i64)\ni64.const 2\nend", "(result i64)", "else"),
    ("br 1", "", "unknown label"),
    ("block\nnop", "", "unterminated"),
    ("end", "", "end without"),
    ("local.get 3\ndrop", "", "unknown local"),
    ("call $nothing", "", "unknown function"),
    ("i64.const 0\nglobal.set $nothing", "", "unknown global"),
    ("i64.const 0\ni64.const 0\ncall_indirect 9", "", "unknown type"),
])
def test_stack_typing_errors(instrs, sig, fragment):
    with pytest.raises(ValidationError, match=fragment):
        check(body(instrs, sig))


def test_error_carries_location():
    with pytest.raises(ValidationError) as ei:
        check(body("nop\nnop\ni64.add\ndrop"))
    assert ei.value.func == "f" and ei.value.index == 2


def test_immutable_global():
    text = "(module (global $g i64 1)\n(func $f\ni64.const 2\nglobal.set $g\n))"
    with pytest.raises(ValidationError, match="immutable"):
        check(text)


def test_start_must_be_nullary():
    text = "(module (func $s (param i64)) (start $s))"
    with pytest.raises(ValidationError, match="start"):
        check(text)


def test_funcptr_make_requires_table_entry():
    text = "(module (func $g) (func $f (result i64)\nfuncptr.make $g\n))"
    with pytest.raises(ValidationError, match="table"):
        check(text)


MODES = ["", "internal", "external", "ptrauth", "internal,external,ptrauth"]


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(MODES))
def test_random_modules_validate_under_their_mode(seed, mode):
    feats = FeatureSet.from_mode(Mode.parse(mode), pseudo=True)
    validate(random_module(seed, mode), feats)

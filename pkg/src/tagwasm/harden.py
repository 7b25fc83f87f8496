"""Module hardening: stack-slot tagging with guard slots, and signed function pointers.

Running :func:`harden` with both switches off is the default lowering:
frame slots get plain shadow-stack storage and ``funcptr.*`` become
``call_indirect`` sequences, so the result can be executed.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

from .module import (
    AMBIENT_GLOBAL, I64, MEMORY_OPS, SP_GLOBAL, TAG_STEP_GLOBAL,
    Function, Global, Instr, Module,
)
from .validate import TypingContext, signature

GRANULE = 16


class HardenError(Exception):
    pass


# Abstract values for the escape analysis.
@dataclass(frozen=True)
class SlotAddr:
    slot: str
    offset: Optional[int]  # None: unknown


@dataclass(frozen=True)
class Const:
    value: int


class _Opaque:
    def __repr__(self):
        return "Opaque"


OPAQUE = _Opaque()
BOTTOM = None


@dataclass
class SlotInfo:
    escapes: bool = False
    unsafe_gep: bool = False

    @property
    def instrument(self) -> bool:
        return self.escapes or self.unsafe_gep


SlotClassification = dict  # slot name -> SlotInfo


class _Analysis:
    def __init__(self, m: Module, f: Function):
        self.m = m
        self.f = f
        ft = m.types[f.type_index]
        self.ctx = TypingContext(m, locals=[*ft.params, *f.locals], results=ft.results)
        self.sizes = {s.name: s.size for s in f.frame_slots}
        self.info: SlotClassification = {s.name: SlotInfo() for s in f.frame_slots}
        self.vals: list = []
        # (op, result arity, height, unreachable, collected label values)
        self.ctrls: list[list] = []

    def escape(self, v):
        if isinstance(v, SlotAddr):
            self.info[v.slot].escapes = True

    def unsafe(self, v):
        if isinstance(v, SlotAddr):
            self.info[v.slot].unsafe_gep = True

    def pop(self):
        top = self.ctrls[-1]
        if len(self.vals) == top[2]:
            return BOTTOM
        return self.vals.pop()

    def pop_n(self, n: int) -> list:
        out = [self.pop() for _ in range(n)]
        out.reverse()
        return out

    def join(self, vs: list):
        vs = [v for v in vs if v is not BOTTOM]
        if not vs:
            return BOTTOM
        first = vs[0]
        if all(isinstance(v, SlotAddr) and v.slot == first.slot for v in vs) and isinstance(first, SlotAddr):
            offs = {v.offset for v in vs}
            return SlotAddr(first.slot, first.offset if len(offs) == 1 else None)
        if all(v == first for v in vs):
            return first
        for v in vs:
            self.escape(v)
        return OPAQUE

    def check_access(self, addr, imm: int, width: int):
        if not isinstance(addr, SlotAddr):
            return
        if addr.offset is None:
            self.unsafe(addr)
            return
        start = addr.offset + imm
        if addr.offset < 0 or start + width > self.sizes[addr.slot]:
            self.unsafe(addr)

    def branch_to(self, depth: int):
        target = self.ctrls[-1 - depth]
        if target[0] == "loop":
            return
        n = target[1]
        vals = self.vals[-n:] if n else []
        if depth == len(self.ctrls) - 1:
            for v in vals:
                self.escape(v)  # returned from the function
        target[4].append(list(vals) + [BOTTOM] * (n - len(vals)))

    def make_unreachable(self):
        top = self.ctrls[-1]
        del self.vals[top[2]:]
        top[3] = True

    def run(self) -> SlotClassification:
        ft = self.m.types[self.f.type_index]
        self.ctrls.append(["func", len(ft.results), 0, False, []])
        for ins in self.f.body:
            self.step(ins)
        # Implicit function end: results leave the function.
        for v in self.pop_n(len(ft.results)):
            self.escape(v)
        for vals in self.ctrls[0][4]:
            for v in vals:
                self.escape(v)
        return self.info

    def step(self, ins: Instr):
        op = ins.op
        if op in ("block", "loop"):
            self.ctrls.append([op, len(ins.args), len(self.vals), False, []])
        elif op == "if":
            self.pop()
            self.ctrls.append([op, len(ins.args), len(self.vals), False, []])
        elif op == "else":
            frame = self.ctrls[-1]
            frame[4].append(self.pop_n(frame[1]))
            del self.vals[frame[2]:]
            frame[0], frame[3] = "else", False
        elif op == "end":
            frame = self.ctrls[-1]
            outs = self.pop_n(frame[1])
            self.ctrls.pop()
            del self.vals[frame[2]:]
            groups = frame[4] + [outs] if frame[0] != "loop" else [outs]
            for i in range(frame[1]):
                self.vals.append(self.join([g[i] for g in groups]))
        elif op == "br":
            self.branch_to(ins.args[0])
            self.make_unreachable()
        elif op == "br_if":
            self.pop()
            self.branch_to(ins.args[0])
        elif op == "return":
            n = len(self.m.types[self.f.type_index].results)
            for v in self.pop_n(n):
                self.escape(v)
            self.make_unreachable()
        elif op == "unreachable":
            self.make_unreachable()
        elif op == "frame.addr":
            self.vals.append(SlotAddr(ins.args[0], 0))
        elif op in ("i64.const", "i32.const"):
            self.vals.append(Const(ins.args[0]))
        elif op in ("i64.add", "i64.sub"):
            b, a = self.pop(), self.pop()
            self.vals.append(self.arith(op, a, b))
        elif op in MEMORY_OPS:
            _, width = MEMORY_OPS[op]
            if "load" in op:
                self.check_access(self.pop(), ins.args[0], width)
                self.vals.append(OPAQUE)
            else:
                value, addr = self.pop(), self.pop()
                self.escape(value)
                self.check_access(addr, ins.args[0], width)
        elif op == "drop":
            self.pop()
        else:
            params, results = signature(ins, self.ctx, self.f)
            for v in self.pop_n(len(params)):
                self.escape(v)
            self.vals.extend([OPAQUE] * len(results))

    def arith(self, op, a, b):
        if isinstance(a, SlotAddr) and isinstance(b, SlotAddr):
            self.escape(a)
            self.escape(b)
            return OPAQUE
        if isinstance(a, SlotAddr) or isinstance(b, SlotAddr):
            ptr, other = (a, b) if isinstance(a, SlotAddr) else (b, a)
            if op == "i64.sub" and ptr is b:
                self.escape(ptr)
                return OPAQUE
            if isinstance(other, Const) and ptr.offset is not None:
                c = other.value - (1 << 64) if other.value >= 1 << 63 else other.value
                delta = c if op == "i64.add" else -c
                return SlotAddr(ptr.slot, ptr.offset + delta)
            if not isinstance(other, Const):
                self.unsafe(ptr)
            return SlotAddr(ptr.slot, None)
        if isinstance(a, Const) and isinstance(b, Const):
            v = a.value + b.value if op == "i64.add" else a.value - b.value
            return Const(v & ((1 << 64) - 1))
        return OPAQUE


def classify_slots(f: Function, m: Module) -> SlotClassification:
    """Escape / unsafe-index analysis of ``f``'s frame slots."""
    if not f.frame_slots:
        return {}
    return _Analysis(m, f).run()


def _pad(n: int) -> int:
    return (n + GRANULE - 1) // GRANULE * GRANULE


@dataclass
class FrameLayout:
    size: int
    offsets: dict  # slot name -> offset from frame base
    padded: dict  # slot name -> padded size
    guard: Optional[int]  # offset of the guard slot, if any


def frame_layout(f: Function, instrumented: set[str]) -> FrameLayout:
    """Slots in declaration order from the frame's high end downward; guard on top."""
    slots = f.frame_slots
    need_guard = bool(instrumented) and slots[0].name not in instrumented
    padded = {s.name: _pad(s.size) for s in slots}
    total = sum(padded.values()) + (GRANULE if need_guard else 0)
    cursor = total
    guard = None
    if need_guard:
        cursor -= GRANULE
        guard = cursor
    offsets = {}
    for s in slots:
        cursor -= padded[s.name]
        offsets[s.name] = cursor
    return FrameLayout(total, offsets, padded, guard)


def _I(op, *args) -> Instr:
    return Instr(op, tuple(args))


def _cycle_tag(prev_local: int, tmp_local: int) -> list[Instr]:
    """Push the successor of the tag in ``prev_local`` within the allocatable pool."""
    return [
        _I("local.get", prev_local),
        _I("i64.const", 56),
        _I("i64.shr_u"),
        _I("i64.const", 15),
        _I("i64.and"),
        _I("global.get", TAG_STEP_GLOBAL),
        _I("i64.add"),
        _I("local.tee", tmp_local),
        _I("local.get", tmp_local),
        _I("i64.const", 4),
        _I("i64.shr_u"),
        # overflow past 15 wraps to the first allocatable tag
        _I("i64.const", 15),
        _I("global.get", AMBIENT_GLOBAL),
        _I("i64.sub"),
        _I("i64.mul"),
        _I("i64.sub"),
    ]


def instrument_stack(f: Function, cls: SlotClassification, m: Module) -> Function:
    """Give ``f`` a shadow-stack frame; tag the slots ``cls`` marks for instrumentation."""
    f = copy.deepcopy(f)
    if not f.frame_slots:
        return f
    ft = m.types[f.type_index]
    instrumented = [s.name for s in f.frame_slots if cls.get(s.name) and cls[s.name].instrument]
    layout = frame_layout(f, set(instrumented))
    base = len(ft.params) + len(f.locals)
    fp = base
    ptr_local = {name: base + 1 + i for i, name in enumerate(instrumented)}
    tmp = base + 1 + len(instrumented)
    f.locals += [I64] * (1 + len(instrumented) + (1 if len(instrumented) > 1 else 0))

    pro = [
        _I("global.get", SP_GLOBAL),
        _I("i64.const", layout.size),
        _I("i64.sub"),
        _I("global.set", SP_GLOBAL),
        _I("global.get", SP_GLOBAL),
        _I("local.set", fp),
    ]
    prev = None
    for name in instrumented:
        off, size = layout.offsets[name], layout.padded[name]
        if prev is None:
            pro += [
                _I("local.get", fp),
                _I("i64.const", size),
                _I("segment.new", off),
                _I("local.set", ptr_local[name]),
            ]
        else:
            pro += _cycle_tag(ptr_local[prev], tmp)
            pro += [
                _I("i64.const", 56),
                _I("i64.shl"),
                _I("local.get", fp),
                _I("i64.const", off),
                _I("i64.add"),
                _I("i64.or"),
                _I("local.set", ptr_local[name]),
                _I("local.get", fp),
                _I("local.get", ptr_local[name]),
                _I("i64.const", size),
                _I("segment.set_tag", off),
            ]
        prev = name

    epi = []
    for name in instrumented:
        epi += [
            _I("local.get", fp),
            _I("global.get", AMBIENT_GLOBAL),
            _I("i64.const", 56),
            _I("i64.shl"),
            _I("i64.const", layout.padded[name]),
            _I("segment.set_tag", layout.offsets[name]),
        ]
    epi += [
        _I("local.get", fp),
        _I("i64.const", layout.size),
        _I("i64.add"),
        _I("global.set", SP_GLOBAL),
    ]

    body = []
    depth = 0
    for ins in f.body:
        op = ins.op
        if op in ("block", "loop", "if"):
            depth += 1
        elif op == "end":
            depth -= 1
        if op == "return":
            body.append(_I("br", depth))
        elif op == "frame.addr":
            name = ins.args[0]
            if name in ptr_local:
                body.append(_I("local.get", ptr_local[name]))
            else:
                body += [_I("local.get", fp), _I("i64.const", layout.offsets[name]), _I("i64.add")]
        else:
            body.append(ins)
    f.body = pro + [Instr("block", ft.results)] + body + [_I("end")] + epi
    return f


def lower_funcptrs(m: Module, ptr_auth: bool) -> Module:
    m = copy.deepcopy(m)
    for f in m.functions:
        out = []
        for ins in f.body:
            if ins.op == "funcptr.make":
                out += [_I("i32.const", m.table.index(ins.args[0])), _I("i64.extend_i32_u")]
                if ptr_auth:
                    out.append(_I("i64.pointer_sign"))
            elif ins.op == "funcptr.call":
                if ptr_auth:
                    out.append(_I("i64.pointer_auth"))
                out += [_I("i32.wrap_i64"), _I("call_indirect", ins.args[0])]
            else:
                out.append(ins)
        f.body = out
    return m


def _ensure_global(m: Module, name: str, mutable: bool):
    if not any(g.name == name for g in m.globals):
        m.globals.append(Global(name, mutable, I64, 0))


@dataclass
class FunctionReport:
    instrumented: list
    guard: bool
    frame_size: int


@dataclass
class HardenReport:
    functions: dict  # name -> FunctionReport

    @property
    def guards(self) -> int:
        return sum(r.guard for r in self.functions.values())

    @property
    def instrumented(self) -> int:
        return sum(len(r.instrumented) for r in self.functions.values())


def harden_with_report(m: Module, stack_safety: bool = False,
                       ptr_auth: bool = False) -> tuple[Module, HardenReport]:
    if m.hardened is not None:
        raise HardenError(f"module already hardened ({' '.join(m.hardened) or 'plain lowering'})")
    out = lower_funcptrs(m, ptr_auth)
    report = HardenReport({})
    new_funcs = []
    for f in out.functions:
        cls = classify_slots(f, out) if stack_safety else {}
        if f.frame_slots:
            inst = [s.name for s in f.frame_slots if s.name in cls and cls[s.name].instrument]
            layout = frame_layout(f, set(inst))
            report.functions[f.name] = FunctionReport(inst, layout.guard is not None, layout.size)
        new_funcs.append(instrument_stack(f, cls, out))
    out.functions = new_funcs
    if report.functions:
        _ensure_global(out, SP_GLOBAL, True)
    if report.instrumented:
        _ensure_global(out, AMBIENT_GLOBAL, False)
        _ensure_global(out, TAG_STEP_GLOBAL, False)
    out.hardened = tuple(n for n, on in (("stack-safety", stack_safety), ("ptr-auth", ptr_auth)) if on)
    return out, report


def harden(m: Module, stack_safety: bool = False, ptr_auth: bool = False) -> Module:
    """Return a lowered copy of ``m``; the input must not already be hardened."""
    return harden_with_report(m, stack_safety, ptr_auth)[0]


def lower(m: Module) -> Module:
    """Default lowering (no instrumentation) unless ``m`` is already lowered."""
    return m if m.hardened is not None else harden(m)

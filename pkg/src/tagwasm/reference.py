"""Slow small-step evaluator, one reduction rule per step.

A configuration is a sequence of items: integer values, plain
instructions, structured control instructions and the administrative
forms ``Label``, ``Frame``, ``TrapA``, ``Breaking`` and ``Returning``.
``step`` rewrites the sequence once at its innermost redex. Memory,
segment and pointer-authentication rules are implemented here from the
bit layout directly, not through the fast engine's helpers, so the two
can be run against each other. The tag RNG and the allocator host
functions are shared with the fast engine.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import TYPE_CHECKING, Union

from . import pac
from .interp import HOST_FUNCS, InvokeError, instantiate
from .module import I32, MEMORY_OPS, SP_GLOBAL, Instr, Module
from .semantics import FuelExhausted, Instance, Trap

if TYPE_CHECKING:
    from .runtime import Runtime

M32 = (1 << 32) - 1
M64 = (1 << 64) - 1
GRANULE = 16


# Structured control instructions
@dataclass(frozen=True)
class Block:
    arity: int
    body: tuple


@dataclass(frozen=True)
class Loop:
    arity: int
    body: tuple


@dataclass(frozen=True)
class If:
    arity: int
    then: tuple
    orelse: tuple


# Administrative instructions
@dataclass
class Label:
    arity: int
    cont: tuple  # instructions resumed when the label is targeted
    body: list


@dataclass
class FrameState:
    func: str
    locals: list
    depth: int


@dataclass
class Frame:
    arity: int
    state: FrameState
    body: list


@dataclass(frozen=True)
class TrapA:
    kind: str
    func: str | None = None


@dataclass(frozen=True)
class Breaking:
    depth: int
    values: tuple


@dataclass(frozen=True)
class Returning:
    values: tuple


Item = Union[int, Instr, Block, Loop, If, Label, Frame, TrapA, Breaking, Returning]


def structure(body) -> tuple:
    """Nest a flat instruction list at its block/loop/if/else/end markers."""
    stack: list[tuple[Instr, list, list | None]] = []
    out: list = []
    for ins in body:
        op = ins.op
        if op in ("block", "loop", "if"):
            stack.append((ins, out, None))
            out = []
        elif op == "else":
            head, parent, _ = stack.pop()
            stack.append((head, parent, out))
            out = []
        elif op == "end":
            head, parent, then = stack.pop()
            arity = len(head.args)
            if head.op == "block":
                node = Block(arity, tuple(out))
            elif head.op == "loop":
                node = Loop(arity, tuple(out))
            elif then is None:
                node = If(arity, tuple(out), ())
            else:
                node = If(arity, tuple(then), tuple(out))
            parent.append(node)
            out = parent
        else:
            out.append(ins)
    return tuple(out)


def _values_prefix(seq: list) -> int:
    i = 0
    while i < len(seq) and isinstance(seq[i], int):
        i += 1
    return i


class ReferenceMachine:
    def __init__(self, rt: "Runtime", inst: Instance):
        self.rt = rt
        self.inst = inst
        self.m: Module = inst.module
        self.bodies = {f.name: structure(f.body) for f in self.m.functions}
        self.types = {f.name: self.m.types[f.type_index] for f in self.m.functions}
        for imp in self.m.imports:
            self.types[imp.func_name] = self.m.types[imp.type_index]
        self.local_counts = {f.name: len(f.locals) for f in self.m.functions}
        self.imports = {imp.func_name: imp for imp in self.m.imports}
        self.steps = 0
        need = 40 * rt.config.max_call_depth + 500
        if sys.getrecursionlimit() < need:
            sys.setrecursionlimit(need)

    # memory, literally
    def _mask(self, idx: int) -> int:
        mode = self.rt.mode
        if mode.external and mode.internal:
            return idx & ~(1 << 56) & M64
        if mode.external:
            return idx & ~(0xF << 56) & M64
        return idx

    def _pointer(self, idx: int) -> tuple[int, int]:
        k = self._mask(idx)
        if (k >> 48) & 0xFF or k >> 60:
            raise Trap("OutOfBounds")
        return k & ((1 << 48) - 1), ((k >> 56) & 0xF) | self.inst.base_tag

    def _access(self, idx: int, offset: int, width: int) -> int:
        addr, tag = self._pointer(idx)
        ea = addr + offset
        rt, inst = self.rt, self.inst
        if not rt.mode.external:
            rt.stats.bounds_checks += 1
            if ea + width > inst.mem_len:
                raise Trap("OutOfBounds")
        phys = inst.base + ea
        if phys + width > len(rt.store.mem):
            raise Trap("OutOfBounds")
        if rt.mode.tagged:
            rt.stats.tag_checks += 1
            for b in range(phys, phys + width):
                if rt.store.tags[b // GRANULE] != tag:
                    rt.stats.tag_failures += 1
                    raise Trap("TagMismatch")
        return phys

    def load(self, idx, offset, width) -> int:
        phys = self._access(idx, offset, width)
        mem = self.rt.store.mem
        return sum(mem[phys + i] << (8 * i) for i in range(width))

    def store(self, idx, offset, width, value):
        phys = self._access(idx, offset, width)
        mem = self.rt.store.mem
        for i in range(width):
            mem[phys + i] = (value >> (8 * i)) & 0xFF

    def _segment(self, k: int, length: int, o: int) -> tuple[int, int]:
        addr, tag = self._pointer(k)
        start = addr + o
        if start % GRANULE or length % GRANULE:
            raise Trap("Unaligned")
        if start + length > self.inst.mem_len:
            raise Trap("OutOfBounds")
        return self.inst.base + start, tag

    def _retag(self, phys: int, length: int, tag: int):
        for g in range(phys // GRANULE, (phys + length) // GRANULE):
            self.rt.store.tags[g] = tag

    def segment_new(self, k, length, o) -> int:
        phys, _ = self._segment(k, length, o)
        t = self.rt.pool.draw()
        p = (k + o) & M64
        result = (p & ~(0xF << 56)) | (t << 56)
        self._retag(phys, length, t)
        for b in range(phys, phys + length):
            self.rt.store.mem[b] = 0
        return result

    def segment_set_tag(self, k, t, length, o):
        phys, _ = self._segment(k, length, o)
        self._retag(phys, length, ((self._mask(t) >> 56) & 0xF) | self.inst.base_tag)

    def segment_free(self, k, length, o):
        phys, tag = self._segment(k, length, o)
        if length:
            self.rt.stats.tag_checks += 1
        for g in range(phys // GRANULE, (phys + length) // GRANULE):
            if self.rt.store.tags[g] != tag:
                self.rt.stats.tag_failures += 1
                raise Trap("TagMismatch")
        self._retag(phys, length, self.rt.pool.next_cycle(tag))

    def _sig(self, payload: int) -> int:
        s = pac.prf(payload, self.rt.key, self.inst.modifier)
        return ((s & 0x3F) << 49) | ((s >> 6) << 60)

    def pointer_sign(self, k: int) -> int:
        payload = k & ~((0xF << 60) | (0x3F << 49)) & M64
        return payload | self._sig(payload)

    def pointer_auth(self, k: int) -> int:
        payload = k & ~((0xF << 60) | (0x3F << 49)) & M64
        if payload | self._sig(payload) != k:
            raise Trap("AuthFailure")
        return payload

    # reduction
    def invoke(self, export: str, args=()) -> list[int]:
        if export not in self.m.exports:
            raise InvokeError(f"no export named {export!r}")
        fname = self.m.exports[export]
        ft = self.types[fname]
        if len(args) != len(ft.params):
            raise InvokeError(f"{export} expects {len(ft.params)} argument(s), got {len(args)}")
        vals = [int(a) & (M32 if t == I32 else M64) for a, t in zip(args, ft.params)]
        return self.run([*vals, Instr("call", (fname,))], depth=-1)

    def run(self, seq: list, depth: int = -1) -> list[int]:
        limit = self.rt.config.max_steps
        while True:
            n = _values_prefix(seq)
            if n == len(seq):
                return seq
            if len(seq) == 1 and isinstance(seq[0], TrapA):
                t = seq[0]
                raise Trap(t.kind, func=t.func)
            self.steps += 1
            if self.steps > limit:
                raise FuelExhausted(f"step budget {limit} exceeded")
            seq = self.step(seq, None, depth)

    def step(self, seq: list, frame: FrameState | None, depth: int) -> list:
        i = _values_prefix(seq)
        vals, e, rest = seq[:i], seq[i], seq[i + 1:]
        if isinstance(e, TrapA):
            return [e]
        if isinstance(e, Label):
            j = _values_prefix(e.body)
            if j == len(e.body):
                return vals + e.body + rest
            inner = e.body[j]
            if isinstance(inner, TrapA):
                return [inner]
            if isinstance(inner, Breaking):
                if inner.depth == 0:
                    kept = list(inner.values[len(inner.values) - e.arity:]) if e.arity else []
                    return vals + kept + list(e.cont) + rest
                return vals + [Breaking(inner.depth - 1, inner.values)] + rest
            if isinstance(inner, Returning):
                return vals + [inner] + rest
            return vals + [Label(e.arity, e.cont, self.step(e.body, frame, depth))] + rest
        if isinstance(e, Frame):
            j = _values_prefix(e.body)
            if j == len(e.body):
                return vals + e.body[len(e.body) - e.arity:] + rest
            inner = e.body[j]
            if isinstance(inner, TrapA):
                return [inner]
            if isinstance(inner, Returning):
                kept = list(inner.values[len(inner.values) - e.arity:]) if e.arity else []
                return vals + kept + rest
            return vals + [Frame(e.arity, e.state, self.step(e.body, e.state, e.state.depth))] + rest
        if isinstance(e, (Breaking, Returning)):  # pragma: no cover - validated code
            raise AssertionError(f"stuck: {e}")
        try:
            return self.reduce(vals, e, rest, frame, depth)
        except Trap as t:
            return [TrapA(t.kind, frame.func if frame else None)]

    def reduce(self, vals: list, e, rest: list, fr: FrameState | None, depth: int) -> list:
        if isinstance(e, Block):
            return vals + [Label(e.arity, (), list(e.body))] + rest
        if isinstance(e, Loop):
            return vals + [Label(0, (e,), list(e.body))] + rest
        if isinstance(e, If):
            c = vals.pop()
            return vals + [Block(e.arity, e.then if c else e.orelse)] + rest
        op, a = e.op, (e.args[0] if e.args else None)
        inst = self.inst
        if op in ("i64.const", "i32.const"):
            return vals + [a] + rest
        if op == "local.get":
            return vals + [fr.locals[a]] + rest
        if op == "local.set":
            fr.locals[a] = vals.pop()
            return vals + rest
        if op == "local.tee":
            fr.locals[a] = vals[-1]
            return vals + rest
        if op == "global.get":
            return vals + [inst.globals[inst.global_names[a]]] + rest
        if op == "global.set":
            v = vals.pop()
            if a == SP_GLOBAL and v < inst.stack_base:
                raise Trap("StackOverflow")
            inst.globals[inst.global_names[a]] = v
            return vals + rest
        if op == "drop":
            vals.pop()
            return vals + rest
        if op == "nop":
            return vals + rest
        if op == "unreachable":
            raise Trap("Unreachable")
        if op == "br":
            return [Breaking(a, tuple(vals))]
        if op == "br_if":
            if vals.pop():
                return [Breaking(a, tuple(vals))]
            return vals + rest
        if op == "return":
            return [Returning(tuple(vals))]
        if op in ("call", "call_indirect"):
            if op == "call":
                fname = a
            else:
                ti = vals.pop()
                if ti >= len(self.m.table):
                    raise Trap("TableOutOfBounds")
                fname = self.m.table[ti]
                if self.types[fname] != self.m.types[a]:
                    raise Trap("IndirectTypeMismatch")
            ft = self.types[fname]
            k = len(ft.params)
            args = vals[len(vals) - k:] if k else []
            del vals[len(vals) - k:]
            if fname in self.imports:
                imp = self.imports[fname]
                _, impl = HOST_FUNCS[(imp.module, imp.name)]
                return vals + list(impl(self.rt, inst, args)) + rest
            if depth + 1 >= self.rt.config.max_call_depth:
                raise Trap("StackOverflow")
            state = FrameState(fname, args + [0] * self.local_counts[fname], depth + 1)
            n = len(ft.results)
            return vals + [Frame(n, state, [Label(n, (), list(self.bodies[fname]))])] + rest
        if op in MEMORY_OPS:
            _, width = MEMORY_OPS[op]
            if "load" in op:
                idx = vals.pop()
                return vals + [self.load(idx, a, width)] + rest
            v = vals.pop()
            idx = vals.pop()
            self.store(idx, a, width, v)
            return vals + rest
        if op == "segment.new":
            ln = vals.pop(); k = vals.pop()
            return vals + [self.segment_new(k, ln, a)] + rest
        if op == "segment.set_tag":
            ln = vals.pop(); t = vals.pop(); k = vals.pop()
            self.segment_set_tag(k, t, ln, a)
            return vals + rest
        if op == "segment.free":
            ln = vals.pop(); k = vals.pop()
            self.segment_free(k, ln, a)
            return vals + rest
        if op == "i64.pointer_sign":
            return vals + [self.pointer_sign(vals.pop())] + rest
        if op == "i64.pointer_auth":
            return vals + [self.pointer_auth(vals.pop())] + rest
        return vals + [self.numeric(op, vals)] + rest

    @staticmethod
    def numeric(op: str, vals: list) -> int:
        if op in ("i32.eqz", "i64.eqz"):
            return int(vals.pop() == 0)
        if op == "i32.wrap_i64":
            return vals.pop() & M32
        if op == "i64.extend_i32_u":
            return vals.pop()
        b = vals.pop()
        x = vals.pop()
        width, name = op.split(".")
        mask = M64 if width == "i64" else M32
        if name == "add":
            return (x + b) & mask
        if name == "sub":
            return (x - b) & mask
        if name == "mul":
            return (x * b) & mask
        if name == "and":
            return x & b
        if name == "or":
            return x | b
        if name == "xor":
            return x ^ b
        if name == "shl":
            return (x << (b % 64)) & mask
        if name == "shr_u":
            return x >> (b % 64)
        cmp = {"eq": x == b, "ne": x != b, "lt_u": x < b, "ge_u": x >= b,
               "gt_u": x > b, "le_u": x <= b}
        return int(cmp[name])


def reference_instantiate(m: Module, rt: "Runtime") -> ReferenceMachine:
    """Instantiate ``m`` (already prepared for ``rt``) and run its start function by small steps."""
    inst = instantiate(m, rt, run_start=False)
    machine = ReferenceMachine(rt, inst)
    if m.start is not None:
        machine.run([Instr("call", (m.start,))])
    return machine

"""Random generator of small, valid, terminating modules.

Calls only go from a function to ones declared after it, loops run a
bounded number of times and are never entered with a call inside, so
every generated program halts. Memory operands mix in-range addresses,
heap and stack pointers, boundary values and junk so that a fair share
of programs trap.
"""

from __future__ import annotations

import random

from .module import I64, PAGE_SIZE, FuncType, Function, FrameSlot, Global, Import, Instr, Module
from .tagmem import Mode

BIN64 = ("i64.add", "i64.sub", "i64.mul", "i64.and", "i64.or", "i64.xor", "i64.shl", "i64.shr_u")
CMP64 = ("i64.eq", "i64.ne", "i64.lt_u", "i64.ge_u", "i64.gt_u", "i64.le_u")
LOADS = ("i64.load", "i64.load8_u")
STORES = ("i64.store", "i64.store8")


def I(op, *args) -> Instr:
    return Instr(op, tuple(args))


class _FuncGen:
    def __init__(self, g: "ModuleGen", fi: int):
        self.g = g
        self.rng = g.rng
        self.fi = fi
        self.f = g.m.functions[fi]
        self.ft = g.m.types[self.f.type_index]
        self.n_params = len(self.ft.params)
        self.in_loop = 0
        self.counters: set[int] = set()

    def new_local(self) -> int:
        self.f.locals.append(I64)
        return self.n_params + len(self.f.locals) - 1

    def assignable(self) -> list[int]:
        return [i for i in range(self.n_locals) if i not in self.counters]

    @property
    def n_locals(self) -> int:
        return self.n_params + len(self.f.locals)

    def address(self, depth: int) -> list[Instr]:
        r = self.rng.random()
        g = self.g
        if r < 0.35:
            return [I("i64.const", self.rng.randrange(0, 2048, 8))]
        if r < 0.5 and self.f.frame_slots:
            s = self.rng.choice(self.f.frame_slots)
            out = [I("frame.addr", s.name)]
            if self.rng.random() < 0.5:
                out += [I("i64.const", self.rng.choice([0, 8, s.size - 1, s.size, 16])), I("i64.add")]
            return out
        if r < 0.65 and self.n_locals:
            return [I("local.get", self.rng.randrange(self.n_locals))]
        if r < 0.75:
            return [I("i64.const", self.rng.choice(g.boundary))]
        if r < 0.8:
            return [I("i64.const", self.rng.getrandbits(64))]
        return self.expr(depth + 1)

    def expr(self, depth: int = 0) -> list[Instr]:
        rng, g = self.rng, self.g
        if depth > 3:
            return self.leaf()
        choices = ["leaf", "leaf", "bin", "load", "if", "block", "call", "malloc"]
        if g.mode.internal:
            choices.append("segnew")
        if g.mode.ptr_auth:
            choices += ["sign", "auth"]
        choices.append("funcptr")
        kind = rng.choice(choices)
        if kind == "leaf":
            return self.leaf()
        if kind == "bin":
            return self.expr(depth + 1) + self.expr(depth + 1) + [I(rng.choice(BIN64))]
        if kind == "load":
            return self.address(depth) + [I(rng.choice(LOADS), rng.choice([0, 0, 8, 16]))]
        if kind == "if":
            return (self.cond(depth + 1) + [I("if", I64)] + self.expr(depth + 1) + [I("else")]
                    + self.expr(depth + 1) + [I("end")])
        if kind == "block":
            return ([I("block", I64)] + self.expr(depth + 1) + self.cond(depth + 1)
                    + [I("br_if", 0), I("drop")] + self.expr(depth + 1) + [I("end")])
        if kind == "call":
            callee = self.callee(want_result=True)
            if callee is None:
                return self.leaf()
            ft = g.m.types[callee.type_index]
            out = []
            for _ in ft.params:
                out += self.expr(depth + 1)
            return out + [I("call", callee.name)]
        if kind == "malloc":
            return [I("i64.const", rng.choice([0, 1, 16, 24, 32, 100]))] + [I("call", "malloc")]
        if kind == "segnew":
            return self.address(depth) + [I("i64.const", rng.choice([0, 16, 32, 17])),
                                          I("segment.new", rng.choice([0, 0, 16, 3]))]
        if kind == "sign":
            return self.expr(depth + 1) + [I("i64.pointer_sign")]
        if kind == "auth":
            return self.expr(depth + 1) + [I("i64.pointer_auth")]
        return [I("funcptr.make", rng.choice(g.m.table))]

    def leaf(self) -> list[Instr]:
        if self.n_locals and self.rng.random() < 0.5:
            return [I("local.get", self.rng.randrange(self.n_locals))]
        return [I("i64.const", self.rng.choice(self.g.constants))]

    def cond(self, depth: int) -> list[Instr]:
        if self.rng.random() < 0.3:
            return self.expr(depth) + [I("i64.eqz")]
        return self.expr(depth) + self.expr(depth) + [I(self.rng.choice(CMP64))]

    def callee(self, want_result: bool | None):
        if self.in_loop:
            return None
        later = [f for f in self.g.m.functions[self.fi + 1:]
                 if want_result is None or bool(self.g.m.types[f.type_index].results) == want_result]
        return self.rng.choice(later) if later else None

    def stmt(self, depth: int = 0) -> list[Instr]:
        rng, g = self.rng, self.g
        choices = ["set", "set", "store", "store", "if"]
        if depth < 2:
            choices.append("loop")
        if not self.in_loop:
            choices += ["call", "indirect"]
        choices += ["free", "global"]
        if g.mode.internal:
            choices += ["settag", "segfree"]
        if rng.random() < 0.03:
            return [I("unreachable")]
        if rng.random() < 0.04:
            return self.early_return()
        kind = rng.choice(choices)
        if kind == "set" and self.assignable():
            return self.expr() + [I("local.set", rng.choice(self.assignable()))]
        if kind == "store":
            return self.address(depth) + self.expr(1) + [I(rng.choice(STORES), rng.choice([0, 0, 8]))]
        if kind == "if":
            body = [I("if")] + self.stmts(depth + 1, 2)
            if rng.random() < 0.5:
                body += [I("else")] + self.stmts(depth + 1, 2)
            return self.cond(1) + body + [I("end")]
        if kind == "loop":
            c = self.new_local()
            self.counters.add(c)
            self.in_loop += 1
            inner = self.stmts(depth + 1, 3)
            self.in_loop -= 1
            return [
                I("i64.const", rng.randint(0, 4)), I("local.set", c),
                I("block"), I("loop"),
                I("local.get", c), I("i64.eqz"), I("br_if", 1),
                *inner,
                I("local.get", c), I("i64.const", 1), I("i64.sub"), I("local.set", c),
                I("br", 0), I("end"), I("end"),
            ]
        if kind == "call":
            callee = self.callee(None)
            if callee is not None:
                ft = g.m.types[callee.type_index]
                out = []
                for _ in ft.params:
                    out += self.expr(1)
                out.append(I("call", callee.name))
                return out + [I("drop")] * len(ft.results)
        if kind == "indirect":
            return self.indirect()
        if kind == "free":
            return self.address(depth) + [I("call", "free")]
        if kind == "global":
            return self.expr(1) + [I("global.set", "g")]
        if kind == "settag":
            return (self.address(depth) + self.expr(2)
                    + [I("i64.const", rng.choice([0, 16, 32])), I("segment.set_tag", rng.choice([0, 16]))])
        if kind == "segfree":
            return self.address(depth) + [I("i64.const", rng.choice([16, 32])),
                                          I("segment.free", rng.choice([0, 0, 16]))]
        return [I("nop")]

    def indirect(self) -> list[Instr]:
        rng, g = self.rng, self.g
        later = [f for f in g.m.functions[self.fi + 1:]]
        if not later:
            return [I("nop")]
        target = rng.choice(later)
        ti = target.type_index if rng.random() < 0.85 else rng.randrange(len(g.m.types))
        ft = g.m.types[ti]
        out = []
        for _ in ft.params:
            out += self.expr(2)
        r = rng.random()
        if r < 0.7:
            out.append(I("funcptr.make", target.name))
        else:
            # forged pointer: a raw table index or junk
            raw = rng.choice([g.m.table.index(target.name), len(g.m.table), rng.getrandbits(32)])
            out.append(I("i64.const", raw))
        out.append(I("funcptr.call", ti))
        return out + [I("drop")] * len(ft.results)

    def early_return(self) -> list[Instr]:
        out = self.cond(1) + [I("if")]
        if self.ft.results:
            out += self.expr(1)
        return out + [I("return"), I("end")]

    def stmts(self, depth: int, k: int) -> list[Instr]:
        out = []
        for _ in range(self.rng.randint(1, k)):
            out += self.stmt(depth)
        return out

    def body(self):
        rng = self.rng
        for s in range(rng.randint(0, 2)):
            self.f.frame_slots.append(FrameSlot(f"s{s}", rng.choice([8, 16, 24, 32]), s))
        self.f.locals += [I64] * rng.randint(0, 2)
        body = self.stmts(0, 4)
        if self.ft.results:
            body += self.expr()
        self.f.body = body


class ModuleGen:
    def __init__(self, seed: int, mode: Mode):
        self.rng = random.Random(seed)
        self.mode = mode
        mem = PAGE_SIZE
        self.boundary = [mem - 8, mem - 1, mem, mem + 16, (1 << 56) | 64, (3 << 56) | 128]
        self.constants = [0, 1, 2, 7, 16, 64, 255, 1 << 32, (1 << 64) - 1, 1 << 56]
        m = Module()
        m.memory_pages = 1
        m.types = [FuncType((), (I64,)), FuncType((I64,), (I64,)), FuncType((I64, I64), ()),
                   FuncType((I64,), ()), FuncType((I64, I64), (I64,))]
        m.imports = [Import("env", "malloc", "malloc", 1), Import("env", "free", "free", 3)]
        m.globals = [Global("g", True, I64, 0)]
        self.m = m

    def generate(self) -> Module:
        rng, m = self.rng, self.m
        n = rng.randint(1, 4)
        for i in range(n):
            ti = 0 if i == 0 else rng.choice([0, 1, 2, 4])
            m.functions.append(Function(f"f{i}", ti))
        m.table = [f.name for f in m.functions]
        m.exports = {"main": "f0"}
        for i in range(n - 1, -1, -1):
            _FuncGen(self, i).body()
        return m


def random_module(seed: int, mode: Mode | str = Mode()) -> Module:
    """A random valid module using the instructions ``mode`` enables."""
    if isinstance(mode, str):
        mode = Mode.parse(mode)
    return ModuleGen(seed, mode).generate()

"""Stack typing for modules, including the segment and pointer-auth rules."""

from __future__ import annotations

from dataclasses import dataclass, field

from .module import (
    BINOPS_I32, BINOPS_I64, CMPOPS_I32, CMPOPS_I64, I32, I64, MEMORY_OPS,
    PAC_OPS, PSEUDO_OPS, SEGMENT_OPS, FuncType, Function, Instr, Module,
)

UNKNOWN = None  # polymorphic operand from unreachable code


class ValidationError(Exception):
    def __init__(self, msg: str, func: str | None = None, index: int | None = None):
        where = f"${func}" if func is not None else "module"
        if index is not None:
            where += f":{index}"
        super().__init__(f"{where}: {msg}")
        self.msg = msg
        self.func = func
        self.index = index


class FeatureError(ValidationError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    segments: bool = True
    pointer_auth: bool = True
    pseudo: bool = True

    @classmethod
    def from_mode(cls, mode, pseudo: bool = True) -> "FeatureSet":
        return cls(segments=mode.internal, pointer_auth=mode.ptr_auth, pseudo=pseudo)


ALL_FEATURES = FeatureSet()

# Fixed signatures: op -> (params, results).
SIMPLE_SIGS: dict[str, tuple[tuple, tuple]] = {
    "i32.wrap_i64": ((I64,), (I32,)),
    "i64.extend_i32_u": ((I32,), (I64,)),
    "i32.eqz": ((I32,), (I32,)),
    "i64.eqz": ((I64,), (I32,)),
    "segment.new": ((I64, I64), (I64,)),
    "segment.set_tag": ((I64, I64, I64), ()),
    "segment.free": ((I64, I64), ()),
    "i64.pointer_sign": ((I64,), (I64,)),
    "i64.pointer_auth": ((I64,), (I64,)),
    "frame.addr": ((), (I64,)),
    "funcptr.make": ((), (I64,)),
    "nop": ((), ()),
}
for _op in BINOPS_I64:
    SIMPLE_SIGS[_op] = ((I64, I64), (I64,))
for _op in CMPOPS_I64:
    SIMPLE_SIGS[_op] = ((I64, I64), (I32,))
for _op in BINOPS_I32:
    SIMPLE_SIGS[_op] = ((I32, I32), (I32,))
for _op in CMPOPS_I32:
    SIMPLE_SIGS[_op] = ((I32, I32), (I32,))
for _op, (_vt, _w) in MEMORY_OPS.items():
    SIMPLE_SIGS[_op] = ((I64,), (_vt,)) if "load" in _op else ((I64, _vt), ())


@dataclass
class CtrlFrame:
    op: str
    results: tuple
    height: int
    unreachable: bool = False

    @property
    def label_types(self) -> tuple:
        return () if self.op == "loop" else self.results


@dataclass
class TypingContext:
    module: Module
    features: FeatureSet = ALL_FEATURES
    locals: list[str] = field(default_factory=list)
    results: tuple = ()

    @property
    def memory(self) -> bool:
        return self.module.memory_pages > 0


def signature(ins: Instr, ctx: TypingContext, func: Function | None = None) -> tuple[tuple, tuple]:
    """Operand types popped and pushed by a non-control instruction."""
    op = ins.op
    m = ctx.module
    if op in SIMPLE_SIGS:
        return SIMPLE_SIGS[op]
    if op == "i32.const":
        return (), (I32,)
    if op == "i64.const":
        return (), (I64,)
    if op == "drop":
        return (UNKNOWN,), ()
    if op in ("local.get", "local.set", "local.tee"):
        t = ctx.locals[ins.args[0]]
        return {"local.get": ((), (t,)), "local.set": ((t,), ()), "local.tee": ((t,), (t,))}[op]
    if op in ("global.get", "global.set"):
        g = m.globals[m.global_index(ins.args[0])]
        return ((), (g.type,)) if op == "global.get" else ((g.type,), ())
    if op == "call":
        ft = m.func_type(ins.args[0])
        return ft.params, ft.results
    if op == "call_indirect":
        ft = m.types[ins.args[0]]
        return (*ft.params, I32), ft.results
    if op == "funcptr.call":
        ft = m.types[ins.args[0]]
        return (*ft.params, I64), ft.results
    raise KeyError(op)


class _Checker:
    def __init__(self, ctx: TypingContext, f: Function):
        self.ctx = ctx
        self.f = f
        self.vals: list = []
        self.ctrls: list[CtrlFrame] = []
        self.idx = 0

    def err(self, msg: str, cls=ValidationError):
        raise cls(msg, self.f.name, self.idx)

    def push(self, t):
        self.vals.append(t)

    def pop(self, expect=UNKNOWN):
        top = self.ctrls[-1]
        if len(self.vals) == top.height:
            if top.unreachable:
                return expect
            self.err(f"operand stack underflow: expected {expect or 'a value'}, stack is empty")
        actual = self.vals.pop()
        if actual is not UNKNOWN and expect is not UNKNOWN and actual != expect:
            self.err(f"type mismatch: expected {expect}, got {actual}")
        return actual if actual is not UNKNOWN else expect

    def pop_all(self, types):
        for t in reversed(types):
            self.pop(t)

    def push_ctrl(self, op, results):
        self.ctrls.append(CtrlFrame(op, tuple(results), len(self.vals)))

    def pop_ctrl(self) -> CtrlFrame:
        if not self.ctrls:
            self.err("unbalanced end")
        frame = self.ctrls[-1]
        self.pop_all(frame.results)
        if len(self.vals) != frame.height:
            extra = self.vals[frame.height:]
            self.err(f"stack height mismatch at end of {frame.op}: leftover {extra}")
        self.ctrls.pop()
        return frame

    def unreachable(self):
        top = self.ctrls[-1]
        del self.vals[top.height:]
        top.unreachable = True

    def label(self, depth: int) -> CtrlFrame:
        if depth >= len(self.ctrls):
            self.err(f"unknown label {depth} (depth {len(self.ctrls) - 1})")
        return self.ctrls[-1 - depth]

    def need_memory(self, op: str):
        if not self.ctx.memory:
            self.err(f"{op} requires a declared memory")

    def gate(self, op: str):
        feats = self.ctx.features
        if op in SEGMENT_OPS and not feats.segments:
            self.err(f"{op} not enabled (internal memory safety off)", FeatureError)
        if op in PAC_OPS and not feats.pointer_auth:
            self.err(f"{op} not enabled (pointer authentication off)", FeatureError)
        if op in PSEUDO_OPS and not feats.pseudo:
            self.err(f"{op} must be lowered before execution", FeatureError)

    def run(self):
        self.push_ctrl("func", self.ctx.results)
        body = self.f.body
        for self.idx, ins in enumerate(body):
            op = ins.op
            self.gate(op)
            if op in ("block", "loop"):
                self.push_ctrl(op, ins.args)
            elif op == "if":
                self.pop(I32)
                self.push_ctrl(op, ins.args)
            elif op == "else":
                if not self.ctrls or self.ctrls[-1].op != "if" or len(self.ctrls) == 1:
                    self.err("else without if")
                frame = self.pop_ctrl()
                self.push_ctrl("else", frame.results)
            elif op == "end":
                if len(self.ctrls) == 1:
                    self.err("end without matching block")
                frame = self.pop_ctrl()
                if frame.op == "if" and frame.results:
                    self.err("if with a result needs an else branch")
                for t in frame.results:
                    self.push(t)
            elif op == "br":
                self.pop_all(self.label(ins.args[0]).label_types)
                self.unreachable()
            elif op == "br_if":
                self.pop(I32)
                types = self.label(ins.args[0]).label_types
                self.pop_all(types)
                for t in types:
                    self.push(t)
            elif op == "return":
                self.pop_all(self.ctx.results)
                self.unreachable()
            elif op == "unreachable":
                self.unreachable()
            else:
                self.check_plain(ins)
        self.idx = len(body)
        if len(self.ctrls) != 1:
            self.err(f"unterminated {self.ctrls[-1].op}")
        self.pop_ctrl()

    def check_plain(self, ins: Instr):
        op = ins.op
        m = self.ctx.module
        if op in MEMORY_OPS or op in SEGMENT_OPS or op == "frame.addr":
            self.need_memory(op)
        if op in ("local.get", "local.set", "local.tee") and ins.args[0] >= len(self.ctx.locals):
            self.err(f"unknown local {ins.args[0]}")
        if op in ("global.get", "global.set"):
            try:
                g = m.globals[m.global_index(ins.args[0])]
            except KeyError:
                self.err(f"unknown global ${ins.args[0]}")
            if op == "global.set" and not g.mutable:
                self.err(f"global ${g.name} is immutable")
        if op in ("call", "funcptr.make") and not m.has_func(ins.args[0]):
            self.err(f"unknown function ${ins.args[0]}")
        if op == "funcptr.make" and ins.args[0] not in m.table:
            self.err(f"${ins.args[0]} is not in the function table")
        if op in ("call_indirect", "funcptr.call") and ins.args[0] >= len(m.types):
            self.err(f"unknown type index {ins.args[0]}")
        if op == "frame.addr":
            try:
                self.f.slot(ins.args[0])
            except KeyError:
                self.err(f"unknown frame slot ${ins.args[0]}")
        try:
            params, results = signature(ins, self.ctx, self.f)
        except KeyError:
            self.err(f"unknown opcode {op}")
        self.pop_all(params)
        for t in results:
            self.push(t)


def check_function(ctx: TypingContext, f: Function):
    m = ctx.module
    if not 0 <= f.type_index < len(m.types):
        raise ValidationError(f"unknown type index {f.type_index}", f.name)
    ft = m.types[f.type_index]
    local_ctx = TypingContext(m, ctx.features, [*ft.params, *f.locals], ft.results)
    seen = set()
    for s in f.frame_slots:
        if s.size < 1:
            raise ValidationError(f"frame slot ${s.name} has size {s.size}", f.name)
        if s.name in seen:
            raise ValidationError(f"duplicate frame slot ${s.name}", f.name)
        seen.add(s.name)
    _Checker(local_ctx, f).run()


def validate(m: Module, features: FeatureSet = ALL_FEATURES) -> Module:
    """Type-check every function; raise :class:`ValidationError` on failure."""
    names = set()
    for imp in m.imports:
        if not 0 <= imp.type_index < len(m.types):
            raise ValidationError(f"import ${imp.func_name}: unknown type index {imp.type_index}")
        names.add(imp.func_name)
    for f in m.functions:
        if f.name in names:
            raise ValidationError(f"duplicate function ${f.name}")
        names.add(f.name)
    for fname in m.table:
        if not any(f.name == fname for f in m.functions):
            raise ValidationError(f"table entry ${fname} is not a declared function")
    for ename, fname in m.exports.items():
        if not any(f.name == fname for f in m.functions):
            raise ValidationError(f"export {ename!r} names unknown function ${fname}")
    if m.start is not None:
        if not any(f.name == m.start for f in m.functions):
            raise ValidationError(f"start function ${m.start} not declared")
        if m.func_type(m.start) != FuncType():
            raise ValidationError("start function must have type [] -> []")
    gnames = set()
    for g in m.globals:
        if g.name in gnames:
            raise ValidationError(f"duplicate global ${g.name}")
        gnames.add(g.name)
    ctx = TypingContext(m, features)
    for f in m.functions:
        check_function(ctx, f)
    return m


def gated_instructions(m: Module, features: FeatureSet) -> list[FeatureError]:
    """Every instruction ``features`` does not enable, in module order."""
    out = []
    for f in m.functions:
        for i, ins in enumerate(f.body):
            op = ins.op
            if op in SEGMENT_OPS and not features.segments:
                out.append(FeatureError(f"{op} not enabled (internal memory safety off)", f.name, i))
            elif op in PAC_OPS and not features.pointer_auth:
                out.append(FeatureError(f"{op} not enabled (pointer authentication off)", f.name, i))
            elif op in PSEUDO_OPS and not features.pseudo:
                out.append(FeatureError(f"{op} must be lowered before execution", f.name, i))
    return out

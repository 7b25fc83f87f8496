"""Abstract syntax for tag-aware mini-WASM modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

I32 = "i32"
I64 = "i64"
VALUE_TYPES = (I32, I64)

PAGE_SIZE = 65536

# Reserved globals the runtime initializes at instantiation.
SP_GLOBAL = "__sp"
AMBIENT_GLOBAL = "__ambient"
TAG_STEP_GLOBAL = "__tag_step"
RESERVED_GLOBALS = (SP_GLOBAL, AMBIENT_GLOBAL, TAG_STEP_GLOBAL)


@dataclass(frozen=True)
class FuncType:
    params: tuple[str, ...] = ()
    results: tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"[{' '.join(self.params)}] -> [{' '.join(self.results)}]"


@dataclass(frozen=True)
class Instr:
    """One instruction: an opcode plus its immediates.

    Immediates by opcode family:
      const            -> (value,)
      local/global     -> (index or name,)
      block/loop/if    -> (result type or None,)
      br/br_if         -> (depth,)
      call/funcptr.make-> (function name,)
      call_indirect/funcptr.call -> (type index,)
      loads/stores, segment.* -> (offset,)
      frame.addr       -> (slot name,)
    """

    op: str
    args: tuple = ()

    def __str__(self) -> str:
        return " ".join([self.op, *(_fmt_imm(self.op, a) for a in self.args)])


def _fmt_imm(op: str, a) -> str:
    if a is None:
        return ""
    if op in ("block", "loop", "if"):
        return f"(result {a})"
    if op in ("call", "funcptr.make", "frame.addr", "global.get", "global.set"):
        return f"${a}"
    return str(a)


@dataclass
class FrameSlot:
    name: str
    size: int
    order: int = 0


@dataclass
class Function:
    name: str
    type_index: int
    locals: list[str] = field(default_factory=list)
    frame_slots: list[FrameSlot] = field(default_factory=list)
    body: list[Instr] = field(default_factory=list)

    def slot(self, name: str) -> FrameSlot:
        for s in self.frame_slots:
            if s.name == name:
                return s
        raise KeyError(name)


@dataclass
class Global:
    name: str
    mutable: bool
    type: str
    init: int


@dataclass
class Import:
    module: str
    name: str
    func_name: str
    type_index: int


@dataclass
class Module:
    types: list[FuncType] = field(default_factory=list)
    imports: list[Import] = field(default_factory=list)
    functions: list[Function] = field(default_factory=list)
    table: list[str] = field(default_factory=list)
    memory_pages: int = 0
    globals: list[Global] = field(default_factory=list)
    exports: dict[str, str] = field(default_factory=dict)
    start: Optional[str] = None
    # Set by the hardening pass; None for surface modules.
    hardened: Optional[tuple[str, ...]] = None

    def func(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def func_type(self, name: str) -> FuncType:
        for imp in self.imports:
            if imp.func_name == name:
                return self.types[imp.type_index]
        return self.types[self.func(name).type_index]

    def has_func(self, name: str) -> bool:
        return any(f.name == name for f in self.functions) or any(
            i.func_name == name for i in self.imports
        )

    def global_index(self, name: str) -> int:
        for i, g in enumerate(self.globals):
            if g.name == name:
                return i
        raise KeyError(name)

    def intern_type(self, ft: FuncType) -> int:
        try:
            return self.types.index(ft)
        except ValueError:
            self.types.append(ft)
            return len(self.types) - 1


# Immediate kinds per opcode.
NONE, I32C, I64C, LOCAL, GLOBAL, BLOCKTYPE, DEPTH, FUNC, TYPE, OFFSET, SLOT = range(11)

MEMORY_OPS = {
    # op: (value type, width)
    "i64.load": (I64, 8),
    "i32.load": (I32, 4),
    "i64.load8_u": (I64, 1),
    "i64.store": (I64, 8),
    "i32.store": (I32, 4),
    "i64.store8": (I64, 1),
}
SEGMENT_OPS = ("segment.new", "segment.set_tag", "segment.free")
PAC_OPS = ("i64.pointer_sign", "i64.pointer_auth")
PSEUDO_OPS = ("frame.addr", "funcptr.make", "funcptr.call")

BINOPS_I64 = (
    "i64.add", "i64.sub", "i64.mul", "i64.and", "i64.or", "i64.xor",
    "i64.shl", "i64.shr_u",
)
CMPOPS_I64 = ("i64.eq", "i64.ne", "i64.lt_u", "i64.ge_u", "i64.gt_u", "i64.le_u")
BINOPS_I32 = ("i32.add", "i32.sub", "i32.and", "i32.or")
CMPOPS_I32 = ("i32.eq", "i32.ne", "i32.lt_u")

IMMEDIATES: dict[str, int] = {
    "i32.const": I32C,
    "i64.const": I64C,
    "local.get": LOCAL,
    "local.set": LOCAL,
    "local.tee": LOCAL,
    "global.get": GLOBAL,
    "global.set": GLOBAL,
    "block": BLOCKTYPE,
    "loop": BLOCKTYPE,
    "if": BLOCKTYPE,
    "else": NONE,
    "end": NONE,
    "br": DEPTH,
    "br_if": DEPTH,
    "return": NONE,
    "call": FUNC,
    "call_indirect": TYPE,
    "unreachable": NONE,
    "nop": NONE,
    "drop": NONE,
    "i32.wrap_i64": NONE,
    "i64.extend_i32_u": NONE,
    "i32.eqz": NONE,
    "i64.eqz": NONE,
    "frame.addr": SLOT,
    "funcptr.make": FUNC,
    "funcptr.call": TYPE,
    "segment.new": OFFSET,
    "segment.set_tag": OFFSET,
    "segment.free": OFFSET,
    "i64.pointer_sign": NONE,
    "i64.pointer_auth": NONE,
}
for _op in (*BINOPS_I64, *CMPOPS_I64, *BINOPS_I32, *CMPOPS_I32):
    IMMEDIATES[_op] = NONE
for _op in MEMORY_OPS:
    IMMEDIATES[_op] = OFFSET

"""Line-oriented text format (``.cwat``) for tag-aware modules.

Declarations are s-expressions; function bodies hold one instruction per
line::

    (module
      (memory 1)
      (func $main (result i64) (local i64)
        (frame $buf 16)
        i64.const 0
        i64.const 16
        segment.new 0
      )
      (export "main" $main))

A ``;;@hardened <flags>`` line marks output of the hardening pass.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .module import (
    BLOCKTYPE, DEPTH, FUNC, GLOBAL, I32, I32C, I64C, IMMEDIATES, LOCAL, NONE,
    OFFSET, SLOT, TYPE, VALUE_TYPES, FrameSlot, Function, FuncType, Global,
    Import, Instr, Module,
)

MASK32 = (1 << 32) - 1
MASK64 = (1 << 64) - 1
HARDENED_MARKER = ";;@hardened"


class ParseError(ValueError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {msg}")
        self.msg = msg
        self.line = line
        self.col = col


@dataclass
class Tok:
    text: str
    line: int
    col: int
    string: bool = False


_TOKEN_RE = re.compile(r'\s+|;;[^\n]*|\(|\)|"(?:[^"\\\n]|\\.)*"|[^\s()";]+|.')


def tokenize(text: str) -> tuple[list[Tok], tuple[str, ...] | None]:
    toks: list[Tok] = []
    hardened = None
    line, line_start = 1, 0
    for m in _TOKEN_RE.finditer(text):
        s = m.group()
        col = m.start() - line_start + 1
        if s.startswith(";;"):
            if s.startswith(HARDENED_MARKER):
                hardened = tuple(s[len(HARDENED_MARKER):].split())
        elif s[0].isspace():
            pass
        elif s.startswith('"'):
            toks.append(Tok(s[1:-1], line, col, string=True))
        elif s == '"':
            raise ParseError("unterminated string", line, col)
        elif s == ";":
            raise ParseError("stray ';'", line, col)
        else:
            toks.append(Tok(s, line, col))
        nl = s.count("\n")
        if nl:
            line += nl
            line_start = m.start() + s.rindex("\n") + 1
    return toks, hardened


def _int(tok: Tok, *, signed: bool = True) -> int:
    s = tok.text.replace("_", "")
    neg = s.startswith("-")
    if neg and not signed:
        raise ParseError(f"expected unsigned integer, got {tok.text!r}", tok.line, tok.col)
    body = s[1:] if s[:1] in "+-" else s
    try:
        v = int(body, 16) if body.lower().startswith("0x") else int(body, 10)
    except ValueError:
        raise ParseError(f"expected integer, got {tok.text!r}", tok.line, tok.col) from None
    return -v if neg else v


class _Parser:
    def __init__(self, toks: list[Tok]):
        self.toks = toks
        self.i = 0
        self.m = Module()
        self.func_names: set[str] = set()

    # token helpers
    def peek(self, k: int = 0) -> Tok | None:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def next(self) -> Tok:
        t = self.peek()
        if t is None:
            last = self.toks[-1] if self.toks else Tok("", 1, 1)
            raise ParseError("unexpected end of input", last.line, last.col)
        self.i += 1
        return t

    def expect(self, text: str) -> Tok:
        t = self.next()
        if t.text != text or t.string:
            raise ParseError(f"expected {text!r}, got {t.text!r}", t.line, t.col)
        return t

    def name(self) -> str:
        t = self.next()
        if t.string or not t.text.startswith("$") or len(t.text) < 2:
            raise ParseError(f"expected $name, got {t.text!r}", t.line, t.col)
        return t.text[1:]

    def string(self) -> str:
        t = self.next()
        if not t.string:
            raise ParseError(f"expected string, got {t.text!r}", t.line, t.col)
        return t.text

    def at_form(self, head: str) -> bool:
        a, b = self.peek(), self.peek(1)
        return a is not None and b is not None and a.text == "(" and b.text == head

    def valtype(self) -> str:
        t = self.next()
        if t.text not in VALUE_TYPES:
            raise ParseError(f"unknown value type {t.text!r}", t.line, t.col)
        return t.text

    def valtypes_until_close(self) -> list[str]:
        out = []
        while self.peek() is not None and self.peek().text != ")":
            out.append(self.valtype())
        self.expect(")")
        return out

    # grammar
    def module(self) -> Module:
        self.expect("(")
        self.expect("module")
        while self.peek() is not None and self.peek().text == "(":
            head = self.peek(1)
            if head is None:
                break
            kind = head.text
            if kind == "type":
                self.type_decl()
            elif kind == "import":
                self.import_decl()
            elif kind == "memory":
                self.next(); self.next()
                if self.m.memory_pages:
                    raise ParseError("duplicate memory", head.line, head.col)
                pages = _int(self.next(), signed=False)
                if pages < 1:
                    raise ParseError("memory needs at least 1 page", head.line, head.col)
                self.m.memory_pages = pages
                self.expect(")")
            elif kind == "global":
                self.global_decl()
            elif kind == "table":
                self.next(); self.next()
                while self.peek() is not None and self.peek().text != ")":
                    self.m.table.append(self.name())
                self.expect(")")
            elif kind == "func":
                self.func_decl()
            elif kind == "export":
                self.next(); self.next()
                tok = self.peek()
                ename = self.string()
                if ename in self.m.exports:
                    raise ParseError(f"duplicate export {ename!r}", tok.line, tok.col)
                self.m.exports[ename] = self.name()
                self.expect(")")
            elif kind == "start":
                self.next(); self.next()
                self.m.start = self.name()
                self.expect(")")
            else:
                raise ParseError(f"unknown declaration {kind!r}", head.line, head.col)
        self.expect(")")
        if self.peek() is not None:
            t = self.peek()
            raise ParseError(f"trailing input {t.text!r}", t.line, t.col)
        return self.m

    def type_decl(self):
        self.next(); self.next()
        if self.peek() is not None and self.peek().text.startswith("$"):
            self.next()  # type names are accepted but not kept
        self.expect("(")
        self.expect("func")
        ft = self.sig()
        self.expect(")")
        self.expect(")")
        self.m.types.append(ft)

    def sig(self) -> FuncType:
        params: list[str] = []
        results: list[str] = []
        while self.at_form("param"):
            self.next(); self.next()
            params += self.valtypes_until_close()
        while self.at_form("result"):
            self.next(); self.next()
            results += self.valtypes_until_close()
        if len(results) > 1:
            t = self.peek()
            raise ParseError("at most one result", t.line, t.col)
        return FuncType(tuple(params), tuple(results))

    def typeuse(self) -> int:
        if self.at_form("type"):
            self.next(); self.next()
            tok = self.peek()
            idx = _int(self.next(), signed=False)
            if idx >= len(self.m.types):
                raise ParseError(f"unknown type index {idx}", tok.line, tok.col)
            self.expect(")")
            return idx
        return self.m.intern_type(self.sig())

    def declare_func_name(self, tok: Tok, name: str):
        if name in self.func_names:
            raise ParseError(f"duplicate function ${name}", tok.line, tok.col)
        self.func_names.add(name)

    def import_decl(self):
        self.next(); self.next()
        mod = self.string()
        nm = self.string()
        self.expect("(")
        self.expect("func")
        tok = self.peek()
        fname = self.name()
        self.declare_func_name(tok, fname)
        tidx = self.typeuse()
        self.expect(")")
        self.expect(")")
        self.m.imports.append(Import(mod, nm, fname, tidx))

    def global_decl(self):
        self.next(); self.next()
        tok = self.peek()
        gname = self.name()
        if any(g.name == gname for g in self.m.globals):
            raise ParseError(f"duplicate global ${gname}", tok.line, tok.col)
        mutable = False
        if self.at_form("mut"):
            self.next(); self.next()
            vt = self.valtype()
            self.expect(")")
            mutable = True
        else:
            vt = self.valtype()
        init = _int(self.next()) & (MASK32 if vt == I32 else MASK64)
        self.expect(")")
        self.m.globals.append(Global(gname, mutable, vt, init))

    def func_decl(self):
        open_tok = self.next()
        self.next()
        tok = self.peek()
        fname = self.name()
        self.declare_func_name(tok, fname)
        tidx = self.typeuse()
        f = Function(fname, tidx)
        while self.at_form("local"):
            self.next(); self.next()
            f.locals += self.valtypes_until_close()
        while self.at_form("frame"):
            self.next(); self.next()
            stok = self.peek()
            sname = self.name()
            if any(s.name == sname for s in f.frame_slots):
                raise ParseError(f"duplicate frame slot ${sname}", stok.line, stok.col)
            ztok = self.next()
            size = _int(ztok, signed=False)
            if size < 1:
                raise ParseError("frame slot size must be >= 1", ztok.line, ztok.col)
            self.expect(")")
            f.frame_slots.append(FrameSlot(sname, size, len(f.frame_slots)))
        # Body: one instruction per line, up to the closing paren.
        while True:
            t = self.peek()
            if t is None:
                raise ParseError("unterminated func", open_tok.line, open_tok.col)
            if t.text == ")" and not t.string:
                self.next()
                break
            if t.text == "(":
                head = self.peek(1)
                what = head.text if head else ""
                raise ParseError(
                    f"declaration ({what} ...) not allowed in function body", t.line, t.col
                )
            f.body.append(self.instr())
        self.m.functions.append(f)

    def instr(self) -> Instr:
        t = self.next()
        op = t.text
        kind = IMMEDIATES.get(op)
        if kind is None or t.string:
            raise ParseError(f"unknown opcode {op!r}", t.line, t.col)
        line = t.line

        def operand() -> Tok:
            a = self.peek()
            if a is None or a.line != line or a.text in ("(", ")"):
                raise ParseError(f"{op} expects an immediate", t.line, t.col)
            return self.next()

        def optional_operand() -> Tok | None:
            a = self.peek()
            if a is None or a.line != line or a.text in ("(", ")"):
                return None
            return self.next()

        if kind == NONE:
            ins = Instr(op)
        elif kind == I32C:
            ins = Instr(op, (_int(operand()) & MASK32,))
        elif kind == I64C:
            ins = Instr(op, (_int(operand()) & MASK64,))
        elif kind in (LOCAL, DEPTH, TYPE):
            ins = Instr(op, (_int(operand(), signed=False),))
        elif kind == OFFSET:
            a = optional_operand()
            off = 0 if a is None else _int(a, signed=False)
            if off > MASK64:
                raise ParseError("offset out of range", a.line, a.col)
            ins = Instr(op, (off,))
        elif kind in (GLOBAL, FUNC, SLOT):
            a = self.peek()
            if a is None or a.line != line:
                raise ParseError(f"{op} expects a $name", t.line, t.col)
            ins = Instr(op, (self.name(),))
        elif kind == BLOCKTYPE:
            a = self.peek()
            if a is not None and a.line == line and self.at_form("result"):
                self.next(); self.next()
                rs = self.valtypes_until_close()
                if len(rs) != 1:
                    raise ParseError("block result must be one type", t.line, t.col)
                ins = Instr(op, (rs[0],))
            else:
                ins = Instr(op)
        else:  # pragma: no cover
            raise AssertionError(kind)
        nxt = self.peek()
        if nxt is not None and nxt.line == line and nxt.text != ")":
            raise ParseError(f"one instruction per line; unexpected {nxt.text!r}", nxt.line, nxt.col)
        return ins


def parse(text: str) -> Module:
    """Parse a ``.cwat`` document into a :class:`Module`."""
    toks, hardened = tokenize(text)
    if not toks:
        raise ParseError("empty document", 1, 1)
    p = _Parser(toks)
    m = p.module()
    m.hardened = hardened
    _check_references(m)
    return m


def _check_references(m: Module):
    for fname in m.table:
        if not any(f.name == fname for f in m.functions):
            raise ParseError(f"table entry ${fname} is not a declared function")
    for ename, fname in m.exports.items():
        if not any(f.name == fname for f in m.functions):
            raise ParseError(f"export {ename!r} names unknown function ${fname}")
    if m.start is not None and not any(f.name == m.start for f in m.functions):
        raise ParseError(f"start names unknown function ${m.start}")


def parse_file(path) -> Module:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def _fmt_const(v: int) -> str:
    return hex(v) if v >= 1 << 63 else str(v)


def format_instr(ins: Instr) -> str:
    kind = IMMEDIATES[ins.op]
    if kind == NONE:
        return ins.op
    if kind in (I32C, I64C):
        return f"{ins.op} {_fmt_const(ins.args[0])}"
    if kind in (GLOBAL, FUNC, SLOT):
        return f"{ins.op} ${ins.args[0]}"
    if kind == BLOCKTYPE:
        return f"{ins.op} (result {ins.args[0]})" if ins.args else ins.op
    return f"{ins.op} {ins.args[0]}"


def _types(ts) -> str:
    return " ".join(ts)


def serialize(m: Module) -> str:
    """Render a module; ``parse(serialize(m)) == m``."""
    out = []
    if m.hardened is not None:
        out.append(f"{HARDENED_MARKER} {' '.join(m.hardened)}".rstrip())
    out.append("(module")
    for ft in m.types:
        parts = ["(func"]
        if ft.params:
            parts.append(f"(param {_types(ft.params)})")
        if ft.results:
            parts.append(f"(result {_types(ft.results)})")
        out.append(f"  (type {' '.join(parts)}))")
    for imp in m.imports:
        out.append(f'  (import "{imp.module}" "{imp.name}" (func ${imp.func_name} (type {imp.type_index})))')
    if m.memory_pages:
        out.append(f"  (memory {m.memory_pages})")
    for g in m.globals:
        vt = f"(mut {g.type})" if g.mutable else g.type
        out.append(f"  (global ${g.name} {vt} {_fmt_const(g.init)})")
    if m.table:
        out.append("  (table " + " ".join(f"${n}" for n in m.table) + ")")
    for f in m.functions:
        head = f"  (func ${f.name} (type {f.type_index})"
        if f.locals:
            head += f" (local {_types(f.locals)})"
        out.append(head)
        for s in f.frame_slots:
            out.append(f"    (frame ${s.name} {s.size})")
        depth = 0
        for ins in f.body:
            if ins.op in ("end", "else"):
                depth -= 1
            out.append("    " + "  " * max(depth, 0) + format_instr(ins))
            if ins.op in ("block", "loop", "if", "else"):
                depth += 1
        out.append("  )")
    for ename, fname in m.exports.items():
        out.append(f'  (export "{ename}" ${fname})')
    if m.start is not None:
        out.append(f"  (start ${m.start})")
    out.append(")")
    return "\n".join(out) + "\n"

"""Fast interpreter for lowered modules."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

from .alloc import Heap
from .module import (
    AMBIENT_GLOBAL, I32, MEMORY_OPS, PAGE_SIZE, PSEUDO_OPS, SP_GLOBAL, TAG_STEP_GLOBAL,
    FuncType, Module,
)
from .semantics import (
    FuelExhausted, Instance, Trap, exec_load, exec_pointer_auth, exec_pointer_sign,
    exec_segment_free, exec_segment_new, exec_segment_set_tag, exec_store,
)
from .tagmem import GRANULE

if TYPE_CHECKING:
    from .runtime import Runtime

M32 = (1 << 32) - 1
M64 = (1 << 64) - 1


class CapacityError(Exception):
    pass


class LinkError(Exception):
    pass


class InvokeError(TypeError):
    """Bad host-side call: unknown export or wrong arguments. Not a trap."""


# Host imports: (module, name) -> (type, implementation(rt, inst, args) -> results)
def _host_malloc(rt, inst, args):
    return [_heap(inst).malloc(args[0])]


def _host_free(rt, inst, args):
    _heap(inst).free(args[0])
    return []


def _host_realloc(rt, inst, args):
    return [_heap(inst).realloc(args[0], args[1])]


def _host_print(rt, inst, args):
    rt.output.append(args[0])
    return []


def _heap(inst: Instance) -> Heap:
    if inst.heap is None:
        raise Trap("OutOfBounds", "instance has no heap region")
    return inst.heap


HOST_FUNCS: dict[tuple[str, str], tuple[FuncType, Callable]] = {
    ("env", "malloc"): (FuncType(("i64",), ("i64",)), _host_malloc),
    ("env", "free"): (FuncType(("i64",), ()), _host_free),
    ("env", "realloc"): (FuncType(("i64", "i64"), ("i64",)), _host_realloc),
    ("env", "print_i64"): (FuncType(("i64",), ()), _host_print),
}


@dataclass
class CompiledFunc:
    name: str
    type: FuncType
    code: list  # (op, immediate) pairs
    local_types: list
    ends: dict  # block/loop/if/else index -> matching end index
    elses: dict  # if index -> else index
    host: Callable | None = None


def compile_function(m: Module, f) -> CompiledFunc:
    ft = m.types[f.type_index]
    code, ends, elses, open_ = [], {}, {}, []
    for i, ins in enumerate(f.body):
        op = ins.op
        if op in PSEUDO_OPS:
            raise LinkError(f"${f.name}: {op} must be lowered before execution")
        if op in MEMORY_OPS:
            vt, width = MEMORY_OPS[op]
            code.append((op, (ins.args[0], width)))
        elif op in ("block", "loop", "if"):
            code.append((op, len(ins.args)))
            open_.append(i)
        elif op == "else":
            elses[open_[-1]] = i
            code.append((op, None))
        elif op == "end":
            start = open_.pop()
            ends[start] = i
            if start in elses:
                ends[elses[start]] = i
            code.append((op, None))
        else:
            code.append((op, ins.args[0] if ins.args else None))
    return CompiledFunc(f.name, ft, code, [*ft.params, *f.locals], ends, elses)


def instantiate(m: Module, rt: "Runtime", run_start: bool = True) -> Instance:
    """Place ``m`` in the arena, tag its memory, link imports, run its start function."""
    cfg = rt.config
    mode = rt.mode
    if mode.external:
        limit = 1 if mode.combined else 15
        if len(rt.instances) >= limit:
            raise CapacityError(f"at most {limit} instance(s) in {mode} mode")
    mem_len = m.memory_pages * PAGE_SIZE
    base = rt.next_free
    if base + mem_len > len(rt.store):
        raise CapacityError("arena exhausted")

    if mode.combined:
        base_tag = ambient = 1
    elif mode.external:
        used = {i.base_tag for i in rt.instances}
        base_tag = ambient = min(t for t in range(1, 16) if t not in used)
    else:
        base_tag = ambient = 0

    stack_top = mem_len
    stack_base = max(0, mem_len - cfg.stack_bytes)
    funcs = {f.name: compile_function(m, f) for f in m.functions}
    for imp in m.imports:
        key = (imp.module, imp.name)
        if key not in HOST_FUNCS:
            raise LinkError(f"unknown import {imp.module}.{imp.name}")
        ft, impl = HOST_FUNCS[key]
        if m.types[imp.type_index] != ft:
            raise LinkError(f"import {imp.module}.{imp.name} must have type {ft}")
        funcs[imp.func_name] = CompiledFunc(imp.func_name, ft, [], [], {}, {}, host=impl)

    pool = rt.pool
    init = {SP_GLOBAL: stack_top, AMBIENT_GLOBAL: pool.ambient if mode.internal else ambient,
            TAG_STEP_GLOBAL: pool.step}
    globals_ = [init.get(g.name, g.init) for g in m.globals]
    inst = Instance(
        module=m,
        index=len(rt.instances),
        base=base,
        mem_len=mem_len,
        base_tag=base_tag,
        ambient=ambient,
        modifier=int(rt.modifier_rng.integers(0, 1 << 64, dtype="uint64")),
        globals=globals_,
        global_names={g.name: i for i, g in enumerate(m.globals)},
        stack_base=stack_base,
        stack_top=stack_top,
        funcs=funcs,
    )
    if mem_len:
        if ambient:
            rt.store.set(base, mem_len, ambient)
        heap_end = stack_base
        heap_start = max(0, heap_end - cfg.heap_bytes)
        if heap_end - heap_start >= 4 * GRANULE:
            inst.heap = Heap(rt, inst, heap_start, heap_end)
    rt.next_free = base + mem_len
    rt.instances.append(inst)
    if run_start and m.start is not None:
        Interpreter(rt).call(inst, m.start, [])
    return inst


def _signed64(x: int) -> int:
    return x - (1 << 64) if x >> 63 else x


class Interpreter:
    def __init__(self, rt: "Runtime"):
        self.rt = rt
        self.max_depth = rt.config.max_call_depth
        need = 8 * self.max_depth + 200
        if sys.getrecursionlimit() < need:
            sys.setrecursionlimit(need)

    def invoke(self, inst: Instance, export: str, args=()) -> list:
        if export not in inst.module.exports:
            raise InvokeError(f"no export named {export!r}")
        fname = inst.module.exports[export]
        cf = inst.funcs[fname]
        args = list(args)
        if len(args) != len(cf.type.params):
            raise InvokeError(
                f"{export} expects {len(cf.type.params)} argument(s), got {len(args)}"
            )
        vals = [int(a) & (M32 if t == I32 else M64) for a, t in zip(args, cf.type.params)]
        return self.call(inst, fname, vals)

    def call(self, inst: Instance, fname: str, args: list, depth: int = 0) -> list:
        cf = inst.funcs[fname]
        if cf.host is not None:
            # Traps raised by the host are attributed to the guest's call instruction.
            return cf.host(self.rt, inst, args)
        if depth >= self.max_depth:
            raise Trap("StackOverflow", "call depth limit", func=fname, index=0)
        return self._run(inst, cf, args, depth)

    def _run(self, inst: Instance, cf: CompiledFunc, args: list, depth: int) -> list:
        rt = self.rt
        stats = rt.stats
        code = cf.code
        ends = cf.ends
        elses = cf.elses
        n = len(code)
        loc = args + [0] * (len(cf.local_types) - len(args))
        glob = inst.globals
        sp_index = inst.global_names.get(SP_GLOBAL)
        stack: list = []
        push = stack.append
        pop = stack.pop
        labels: list = []  # (is_loop, target index, stack height, arity)
        module = inst.module
        pc = 0
        steps = 0
        budget = rt.config.max_steps - stats.instructions
        try:
            while pc < n:
                op, a = code[pc]
                pc += 1
                steps += 1
                if steps > budget:
                    raise FuelExhausted(f"step budget {rt.config.max_steps} exceeded")
                if op == "local.get":
                    push(loc[a])
                elif op == "i64.const" or op == "i32.const":
                    push(a)
                elif op == "local.set":
                    loc[a] = pop()
                elif op == "local.tee":
                    loc[a] = stack[-1]
                elif op == "i64.add":
                    b = pop(); stack[-1] = (stack[-1] + b) & M64
                elif op == "i64.sub":
                    b = pop(); stack[-1] = (stack[-1] - b) & M64
                elif op == "i64.mul":
                    b = pop(); stack[-1] = (stack[-1] * b) & M64
                elif op == "i64.and":
                    b = pop(); stack[-1] &= b
                elif op == "i64.or":
                    b = pop(); stack[-1] |= b
                elif op == "i64.xor":
                    b = pop(); stack[-1] ^= b
                elif op == "i64.shl":
                    b = pop(); stack[-1] = (stack[-1] << (b & 63)) & M64
                elif op == "i64.shr_u":
                    b = pop(); stack[-1] >>= (b & 63)
                elif op == "i64.eq":
                    b = pop(); stack[-1] = int(stack[-1] == b)
                elif op == "i64.ne":
                    b = pop(); stack[-1] = int(stack[-1] != b)
                elif op == "i64.lt_u":
                    b = pop(); stack[-1] = int(stack[-1] < b)
                elif op == "i64.ge_u":
                    b = pop(); stack[-1] = int(stack[-1] >= b)
                elif op == "i64.gt_u":
                    b = pop(); stack[-1] = int(stack[-1] > b)
                elif op == "i64.le_u":
                    b = pop(); stack[-1] = int(stack[-1] <= b)
                elif op == "i32.add":
                    b = pop(); stack[-1] = (stack[-1] + b) & M32
                elif op == "i32.sub":
                    b = pop(); stack[-1] = (stack[-1] - b) & M32
                elif op == "i32.and":
                    b = pop(); stack[-1] &= b
                elif op == "i32.or":
                    b = pop(); stack[-1] |= b
                elif op == "i32.eq":
                    b = pop(); stack[-1] = int(stack[-1] == b)
                elif op == "i32.ne":
                    b = pop(); stack[-1] = int(stack[-1] != b)
                elif op == "i32.lt_u":
                    b = pop(); stack[-1] = int(stack[-1] < b)
                elif op == "i32.eqz" or op == "i64.eqz":
                    stack[-1] = int(stack[-1] == 0)
                elif op == "i32.wrap_i64":
                    stack[-1] &= M32
                elif op == "i64.extend_i32_u":
                    pass
                elif op == "drop":
                    pop()
                elif op == "nop":
                    pass
                elif op == "global.get":
                    push(glob[inst.global_names[a]])
                elif op == "global.set":
                    gi = inst.global_names[a]
                    v = pop()
                    if gi == sp_index and v < inst.stack_base:
                        raise Trap("StackOverflow", "shadow stack exhausted", address=v)
                    glob[gi] = v
                elif op in MEMORY_OPS:
                    offset, width = a
                    if "load" in op:
                        idx = pop()
                        push(exec_load(rt, inst, idx, offset, width))
                    else:
                        v = pop()
                        idx = pop()
                        exec_store(rt, inst, idx, offset, width, v)
                elif op == "block":
                    labels.append((False, ends[pc - 1], len(stack), a))
                elif op == "loop":
                    labels.append((True, pc - 1, len(stack), 0))
                elif op == "if":
                    c = pop()
                    labels.append((False, ends[pc - 1], len(stack), a))
                    if not c:
                        e = elses.get(pc - 1)
                        pc = e + 1 if e is not None else ends[pc - 1]
                elif op == "else":
                    pc = ends[pc - 1]
                elif op == "end":
                    labels.pop()
                elif op == "br" or op == "br_if":
                    if op == "br_if" and not pop():
                        continue
                    if a == len(labels):
                        break
                    is_loop, target, height, arity = labels[-1 - a]
                    if arity:
                        vals = stack[-arity:]
                        del stack[height:]
                        stack.extend(vals)
                    else:
                        del stack[height:]
                    del labels[len(labels) - 1 - a:]
                    pc = target if is_loop else target + 1
                elif op == "return":
                    break
                elif op == "call":
                    callee = inst.funcs[a]
                    k = len(callee.type.params)
                    if k:
                        cargs = stack[-k:]
                        del stack[-k:]
                    else:
                        cargs = []
                    stats.instructions += steps
                    budget -= steps
                    steps = 0
                    stack.extend(self.call(inst, a, cargs, depth + 1))
                elif op == "call_indirect":
                    ti = pop()
                    table = module.table
                    if ti >= len(table):
                        raise Trap("TableOutOfBounds", f"table index {ti}")
                    target_name = table[ti]
                    callee = inst.funcs[target_name]
                    if callee.type != module.types[a]:
                        raise Trap("IndirectTypeMismatch",
                                   f"${target_name} has type {callee.type}, expected {module.types[a]}")
                    k = len(callee.type.params)
                    if k:
                        cargs = stack[-k:]
                        del stack[-k:]
                    else:
                        cargs = []
                    stats.instructions += steps
                    budget -= steps
                    steps = 0
                    stack.extend(self.call(inst, target_name, cargs, depth + 1))
                elif op == "unreachable":
                    raise Trap("Unreachable")
                elif op == "segment.new":
                    ln = pop(); k = pop()
                    push(exec_segment_new(rt, inst, k, ln, a))
                elif op == "segment.set_tag":
                    ln = pop(); t = pop(); k = pop()
                    exec_segment_set_tag(rt, inst, k, t, ln, a)
                elif op == "segment.free":
                    ln = pop(); k = pop()
                    exec_segment_free(rt, inst, k, ln, a)
                elif op == "i64.pointer_sign":
                    stack[-1] = exec_pointer_sign(rt, inst, stack[-1])
                elif op == "i64.pointer_auth":
                    stack[-1] = exec_pointer_auth(rt, inst, stack[-1])
                else:
                    raise LinkError(f"unsupported opcode {op}")
        except Trap as t:
            if t.func is None:
                t.func = cf.name
                t.index = pc - 1
            raise
        finally:
            stats.instructions += steps
        k = len(cf.type.results)
        return stack[-k:] if k else []

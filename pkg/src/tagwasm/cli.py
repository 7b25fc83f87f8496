"""Command-line front end: run, validate, harden, inspect-tags.

Exit codes: 0 success, 1 trap, 2 parse/validation/link error, 3 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .harden import HardenError, harden_with_report
from .interp import CapacityError, InvokeError, LinkError
from .runtime import ConfigError, Runtime, RuntimeConfig
from .semantics import FuelExhausted, Trap
from .tagmem import GRANULE, Mode
from .textformat import ParseError, parse_file, serialize
from .validate import ALL_FEATURES, FeatureSet, ValidationError, gated_instructions, validate

EXIT_OK, EXIT_TRAP, EXIT_INVALID, EXIT_USAGE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _mode(text: str) -> Mode:
    try:
        return Mode.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CAGE_SEED")
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise UsageError(f"CAGE_SEED is not an integer: {env!r}") from None
    return 0


def _split_invoke(tokens: list[str], files: list[str]) -> tuple[str, list[int], list[str]]:
    """``--invoke NAME [ints...]`` greedily swallows the module paths that follow; split them off."""
    name, rest = tokens[0], tokens[1:]
    ints = []
    i = 0
    while i < len(rest):
        try:
            ints.append(int(rest[i], 0))
        except ValueError:
            break
        i += 1
    return name, ints, rest[i:] + files


def cmd_run(args, out, err) -> int:
    if not args.invoke:
        raise UsageError("run: --invoke NAME is required")
    name, ints, files = _split_invoke(args.invoke, args.modules)
    if not files:
        raise UsageError("run: at least one module file is required")
    overrides = {"seed": _seed(args)}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    overrides["instances"] = len(files)
    try:
        cfg = (RuntimeConfig.from_file(args.config, **overrides) if args.config
               else RuntimeConfig(**overrides))
    except (ConfigError, OSError) as e:
        raise UsageError(str(e)) from None
    rt = Runtime(cfg)
    try:
        modules = [parse_file(p) for p in files]
    except OSError as e:
        raise UsageError(str(e)) from None

    code = EXIT_OK
    try:
        instances = [rt.add_instance(m) for m in modules]
        target = next((i for i in instances if name in i.module.exports), None)
        if target is None:
            raise UsageError(f"no module exports {name!r}")
        results = rt.invoke(target, name, *ints)
        for v in rt.output:
            print(f"output {v}", file=out)
        for v in results:
            print(v, file=out)
    except Trap as t:
        for v in rt.output:
            print(f"output {v}", file=out)
        print(f"trap: {t}", file=err)
        code = EXIT_TRAP
    except FuelExhausted as e:
        print(f"fuel: {e}", file=err)
        code = EXIT_TRAP
    except InvokeError as e:
        raise UsageError(str(e)) from None
    except CapacityError as e:
        raise UsageError(str(e)) from None
    if args.stats:
        for line in rt.snapshot_stats().lines():
            print(line, file=out)
    if args.dump_tags:
        Path(args.dump_tags).write_text(rt.dump_tags())
    return code


def cmd_validate(args, out, err) -> int:
    m = parse_file(args.module)
    if args.mode is not None:
        features = FeatureSet.from_mode(args.mode, pseudo=m.hardened is None)
        gated = gated_instructions(m, features)
        if gated:
            for e in gated:
                print(e, file=err)
            return EXIT_INVALID
    else:
        features = ALL_FEATURES
    validate(m, features)
    print("ok", file=out)
    return EXIT_OK


def cmd_harden(args, out, err) -> int:
    m = parse_file(args.input)
    validate(m)
    hm, report = harden_with_report(m, stack_safety=args.stack_safety, ptr_auth=args.ptr_auth)
    validate(hm, FeatureSet(segments=args.stack_safety, pointer_auth=args.ptr_auth, pseudo=False))
    Path(args.output).write_text(serialize(hm))
    print(f"instrumented slots: {report.instrumented}, guard slots: {report.guards}", file=err)
    return EXIT_OK


def _runs(granules: dict[int, int]) -> list[tuple[int, int, int]]:
    """Maximal (first, last, tag) runs of consecutive granules sharing a tag."""
    out = []
    for g in sorted(granules):
        t = granules[g]
        if out and out[-1][1] == g - 1 and out[-1][2] == t:
            out[-1] = (out[-1][0], g, t)
        else:
            out.append((g, g, t))
    return out


def cmd_inspect(args, out, err) -> int:
    text = Path(args.dump).read_text()
    regions = []
    granules = {}
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "#":
                _, _, idx, g0, g1, amb = parts
                regions.append((int(idx), int(g0), int(g1), int(amb, 16)))
            else:
                g, t = parts
                granules[int(g)] = int(t, 16)
        except ValueError:
            print(f"{args.dump}:{n}: malformed line {line!r}", file=err)
            return EXIT_INVALID
    runs = _runs(granules)
    for idx, g0, g1, amb in regions:
        print(f"instance {idx}: granules {g0}..{g1 - 1}, ambient tag {amb:x}", file=out)
        cursor = g0
        for a, b, t in runs:
            if not g0 <= a < g1:
                continue
            if a > cursor:
                print(f"  {cursor:>8}..{a - 1:<8} ambient ({a - cursor} granules)", file=out)
            print(f"  {a:>8}..{b:<8} tag {t:x} ({b - a + 1} granules, "
                  f"bytes {a * GRANULE:#x}..{(b + 1) * GRANULE:#x})", file=out)
            cursor = b + 1
        if cursor < g1:
            print(f"  {cursor:>8}..{g1 - 1:<8} ambient ({g1 - cursor} granules)", file=out)
    outside = [r for r in runs if not any(g0 <= r[0] < g1 for _, g0, g1, _ in regions)]
    for a, b, t in outside:
        print(f"runtime granules {a}..{b}: tag {t:x}", file=out)
    if not regions and not runs:
        print("all granules ambient", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tagwasm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="instantiate modules and invoke an export")
    r.add_argument("--mode", type=_mode, default=None,
                   help="comma list of internal, external, ptrauth; empty for baseline")
    r.add_argument("--seed", type=lambda s: int(s, 0), default=None)
    r.add_argument("--invoke", nargs="+", metavar="NAME [INT ...]")
    r.add_argument("--stats", action="store_true")
    r.add_argument("--dump-tags", metavar="FILE")
    r.add_argument("--config", metavar="FILE", help="key = value runtime configuration")
    r.add_argument("--max-steps", type=int, default=None)
    r.add_argument("modules", nargs="*")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="type-check a module")
    v.add_argument("--mode", type=_mode, default=None)
    v.add_argument("module")
    v.set_defaults(func=cmd_validate)

    h = sub.add_parser("harden", help="instrument stack slots and function pointers")
    h.add_argument("input")
    h.add_argument("-o", "--output", required=True)
    h.add_argument("--stack-safety", action="store_true")
    h.add_argument("--ptr-auth", action="store_true")
    h.set_defaults(func=cmd_harden)

    i = sub.add_parser("inspect-tags", help="pretty-print a --dump-tags file")
    i.add_argument("dump")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: run, validate, harden, inspect-tags")
        return args.func(args, out, err)
    except UsageError as e:
        print(f"usage error: {e}", file=err)
        return EXIT_USAGE
    except (ParseError, ValidationError, HardenError, LinkError) as e:
        print(f"error: {e}", file=err)
        return EXIT_INVALID
    except OSError as e:
        print(f"usage error: {e}", file=err)
        return EXIT_USAGE


def main_entry():
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()

"""Arena, keys, tag pool and instance registry for one execution context."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .harden import harden
from .interp import CapacityError, Interpreter, instantiate
from .module import Module
from .pac import SigningKey
from .semantics import Instance
from .tagmem import GRANULE, Mode, TagPool, TagStore
from .validate import FeatureSet, validate

MAX_EXTERNAL_INSTANCES = 15


class ConfigError(ValueError):
    pass


@dataclass
class RuntimeConfig:
    mode: Mode = field(default_factory=Mode)
    seed: int = 0
    arena_bytes: int = 4 << 20
    stack_bytes: int = 16 << 10
    heap_bytes: int = 32 << 10
    runtime_bytes: int = 64 << 10  # low arena region owned by the runtime, always tag 0
    max_call_depth: int = 200
    max_steps: int = 10**7
    instances: int = 1  # declared number of guests
    mte: str = "sync"

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = Mode.parse(self.mode)
        if self.mte != "sync":
            raise ConfigError(f"only synchronous tag checking is supported, got {self.mte!r}")
        for name in ("arena_bytes", "stack_bytes", "heap_bytes", "runtime_bytes"):
            v = getattr(self, name)
            if v < 0 or v % GRANULE:
                raise ConfigError(f"{name} must be a non-negative multiple of 16")
        if self.arena_bytes <= self.runtime_bytes:
            raise ConfigError("arena must be larger than the runtime region")
        if self.max_call_depth < 1:
            raise ConfigError("max_call_depth must be positive")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed must fit in 64 bits")
        if self.mode.combined and self.instances > 1:
            raise ConfigError("internal and external safety together isolate a single instance")
        if self.mode.external and self.instances > MAX_EXTERNAL_INSTANCES:
            raise ConfigError(f"external isolation supports at most {MAX_EXTERNAL_INSTANCES} instances")

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RuntimeConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            if key in ("mode", "mte"):
                kw[key] = value.strip("\"'")
            else:
                try:
                    kw[key] = int(value, 0)
                except ValueError:
                    raise ConfigError(f"line {n}: {key} needs an integer") from None
        kw.update(overrides)
        try:
            return cls(**kw)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_file(cls, path, **overrides) -> "RuntimeConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


@dataclass
class RunStats:
    instructions: int = 0
    tag_checks: int = 0
    tag_failures: int = 0
    bounds_checks: int = 0
    granules_non_ambient: int = 0
    tag_storage_bytes: int = 0

    def lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]


class Runtime:
    def __init__(self, config: RuntimeConfig | None = None, **kw):
        self.config = config if config is not None else RuntimeConfig(**kw)
        if config is not None and kw:
            self.config = dataclasses.replace(config, **kw)
        cfg = self.config
        self.mode: Mode = cfg.mode
        self.store = TagStore(cfg.arena_bytes)
        key_ss, tag_ss, mod_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        k0, k1 = np.random.default_rng(key_ss).integers(0, 1 << 64, size=2, dtype=np.uint64)
        self.key = SigningKey(int(k0), int(k1))
        self.pool = TagPool.for_mode(self.mode, np.random.default_rng(tag_ss))
        self.modifier_rng = np.random.default_rng(mod_ss)
        self.instances: list[Instance] = []
        self.next_free = cfg.runtime_bytes
        self.stats = RunStats(tag_storage_bytes=self.store.tag_storage_bytes)
        self.output: list[int] = []

    @property
    def features(self) -> FeatureSet:
        return FeatureSet.from_mode(self.mode, pseudo=False)

    def prepare(self, m: Module) -> Module:
        """Lower pseudo-instructions (instrumenting per mode) and validate for this runtime."""
        if m.hardened is None:
            m = harden(m, stack_safety=self.mode.internal, ptr_auth=self.mode.ptr_auth)
        return validate(m, self.features)

    def add_instance(self, m: Module) -> Instance:
        if self.mode.combined and self.instances:
            raise CapacityError("combined mode isolates a single instance")
        return instantiate(self.prepare(m), self)

    def invoke(self, inst: Instance, export: str, *args) -> list[int]:
        return Interpreter(self).invoke(inst, export, args)

    def ambient_map(self) -> np.ndarray:
        """Expected tag per granule with no live segments."""
        amb = np.zeros(len(self.store.tags), dtype=np.uint8)
        for inst in self.instances:
            g0 = inst.base // GRANULE
            amb[g0:g0 + inst.mem_len // GRANULE] = inst.ambient
        return amb

    def non_ambient_granules(self) -> np.ndarray:
        return np.flatnonzero(self.store.tag_array() != self.ambient_map())

    def snapshot_stats(self) -> RunStats:
        s = dataclasses.replace(self.stats)
        s.granules_non_ambient = int(self.non_ambient_granules().size)
        s.tag_storage_bytes = self.store.tag_storage_bytes
        return s

    def dump_tags(self) -> str:
        """``granule tag`` lines for granules whose tag differs from their region's ambient."""
        tags = self.store.tag_array()
        lines = [f"# ambient {inst.index} {inst.base // GRANULE} "
                 f"{(inst.base + inst.mem_len) // GRANULE} {inst.ambient:x}\n"
                 for inst in self.instances]
        lines += [f"{g} {tags[g]:x}\n" for g in self.non_ambient_granules()]
        return "".join(lines)

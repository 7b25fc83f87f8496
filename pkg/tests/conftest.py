from __future__ import annotations

import pytest

from tagwasm import Runtime, RuntimeConfig, Trap, parse

MEM1 = """
(module
  (memory 1)
  (func $nop)
  (export "nop" $nop)
)
"""


def make_runtime(mode: str = "", seed: int = 0, **kw) -> Runtime:
    return Runtime(RuntimeConfig(mode=mode, seed=seed, **kw))


def instance(mode: str = "", seed: int = 0, text: str = MEM1, **kw):
    rt = make_runtime(mode, seed, **kw)
    return rt, rt.add_instance(parse(text))


def outcome(fn):
    """Results list, or the trap kind as a string."""
    try:
        return fn()
    except Trap as t:
        return t.kind


@pytest.fixture
def internal():
    return instance("internal", seed=1)

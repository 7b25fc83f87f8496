"""Tagged-memory WebAssembly subset: text format, validator, hardening pass and interpreter."""

from .harden import HardenError, harden, harden_with_report, lower
from .interp import CapacityError, InvokeError, LinkError
from .module import Module
from .runtime import ConfigError, RunStats, Runtime, RuntimeConfig
from .semantics import FuelExhausted, Instance, Trap
from .tagmem import Mode
from .textformat import ParseError, parse, parse_file, serialize
from .validate import FeatureError, FeatureSet, ValidationError, validate

__all__ = [
    "CapacityError", "ConfigError", "FeatureError", "FeatureSet", "FuelExhausted",
    "HardenError", "Instance", "InvokeError", "LinkError", "Mode", "Module", "ParseError",
    "RunStats", "Runtime", "RuntimeConfig", "Trap", "ValidationError", "harden",
    "harden_with_report", "lower", "parse", "parse_file", "serialize", "validate",
]

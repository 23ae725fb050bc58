"""Exception hierarchy. Each class carries a stable ``code`` for the CLI's error JSON."""

from __future__ import annotations


class MixforgeError(Exception):
    code = "error"

    def to_dict(self) -> dict:
        return {"error": self.code, "type": type(self).__name__, "message": str(self)}


class InputError(MixforgeError, ValueError):
    code = "input"


class NumericError(InputError):
    code = "numeric"


class ParameterError(InputError):
    code = "parameter"


class ConfigError(MixforgeError):
    code = "config"


class DependencyError(ConfigError):
    code = "dependency"


class UnsupportedArchitectureError(ConfigError):
    code = "unsupported_architecture"


class CheckpointError(MixforgeError):
    code = "checkpoint"


class ConsistencyError(MixforgeError, RuntimeError):
    code = "consistency"


class DivergenceError(MixforgeError, RuntimeError):
    code = "divergence"

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["diagnostics"] = self.diagnostics
        return out

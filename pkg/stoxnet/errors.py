"""Exception hierarchy. Each error carries the CLI exit code it maps to."""


class StoxError(Exception):
    exit_code = 1


class ConfigError(StoxError, ValueError):
    exit_code = 2


class CheckpointError(StoxError):
    exit_code = 2


class ShapeError(StoxError, ValueError):
    exit_code = 2


class CostModelError(StoxError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DatasetError(StoxError):
    exit_code = 3


class DivergenceError(StoxError):
    exit_code = 4

    def __init__(self, layer: str, message: str | None = None):
        self.layer = layer
        super().__init__(message or f"non-finite values first produced by layer '{layer}'")


class NonFiniteError(DivergenceError):
    def __init__(self, layer: str):
        super().__init__(layer, f"non-finite converter input in layer '{layer}'")


class StateError(StoxError, RuntimeError):
    pass


class DiagnosticsError(StoxError):
    pass

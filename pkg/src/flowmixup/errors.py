"""Exception hierarchy. CLI exit codes key off these classes."""


class FlowMixupError(Exception):
    exit_code = 1


class ConfigError(FlowMixupError, ValueError):
    exit_code = 2


class DimensionError(FlowMixupError, ValueError):
    exit_code = 2


class StateError(FlowMixupError, RuntimeError):
    exit_code = 2


class NumericError(FlowMixupError, ArithmeticError):
    exit_code = 4


class GenerationError(FlowMixupError, ValueError):
    exit_code = 2


class ParseError(FlowMixupError, ValueError):
    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset

"""Exception hierarchy shared by every fedstil module."""


class FedStilError(Exception):
    """Base class for all library errors."""


class InvalidInputError(FedStilError, ValueError):
    pass


class DimensionError(FedStilError, ValueError):
    pass


class InvalidLabelError(FedStilError, ValueError):
    pass


class RoundRangeError(FedStilError, IndexError):
    pass


class ParseError(FedStilError, ValueError):
    """Malformed embedding/config/checkpoint file. Carries the offending line when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyTaskError(FedStilError, ValueError):
    pass


class OrderingError(FedStilError, ValueError):
    pass


class MissingFeatureError(FedStilError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class MissingParamsError(FedStilError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class EmptyEvalError(FedStilError, ValueError):
    pass


class UndefinedForgettingError(FedStilError, ValueError):
    pass


class ConfigError(FedStilError, ValueError):
    pass

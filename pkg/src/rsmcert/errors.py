"""Exception types shared across the package."""


class RsmError(Exception):
    """Base class for all errors raised by rsmcert."""


class InvalidInput(RsmError, ValueError):
    pass


class ConfigError(RsmError, ValueError):
    pass


class ResourceError(RsmError):
    """A grid or sample store would exceed the configured size cap."""


class TrainingDiverged(RsmError):
    pass


class ContractError(RsmError):
    pass


class ParseError(RsmError, ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)

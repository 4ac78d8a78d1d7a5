"""Exception hierarchy shared by every module.

Each class maps to one failure category; the CLI turns them into exit codes.
"""


class SonoError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SonoError, ValueError):
    pass


class InvalidState(SonoError, RuntimeError):
    pass


class InvalidData(SonoError, ValueError):
    pass


class InvalidConfiguration(SonoError, ValueError):
    pass


class CorruptFile(SonoError, IOError):
    pass


class VersionMismatch(SonoError, ValueError):
    pass


class ParseError(SonoError, ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class NumericFailure(SonoError, ArithmeticError):
    pass

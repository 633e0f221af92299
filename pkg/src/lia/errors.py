"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every failure raised by the
library should be one of them.
"""


class LiaError(Exception):
    exit_code = 1


class ConfigurationError(LiaError):
    """Invalid or inconsistent model / run configuration."""

    exit_code = 2

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


class DataError(LiaError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ValidationError(DataError):
    pass


class ShapeError(LiaError, ValueError):
    exit_code = 4


class NumericError(LiaError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index

"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto exit codes: validation problems exit with 2,
numeric failures with 3 and file/format problems with 4.
"""


class TGCNError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ValidationError(TGCNError, ValueError):
    exit_code = 2


class StructuralError(ValidationError):
    """Index out of range or inconsistent dimensions."""


class NumericError(TGCNError, ArithmeticError):
    exit_code = 3


class FormatError(TGCNError):
    """Malformed or truncated file. ``line`` is 1-based when known."""

    exit_code = 4

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

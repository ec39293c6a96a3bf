"""Exception hierarchy. The CLI maps the three families onto exit codes 2/3/4."""


class PdmError(Exception):
    exit_code = 1


class ConfigError(PdmError, ValueError):
    exit_code = 2


class DataError(PdmError, ValueError):
    exit_code = 3


class NumericError(PdmError, ArithmeticError):
    exit_code = 4


class FormatError(DataError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")


class BadMagicError(FormatError):
    def __init__(self, observed, expected, path=None):
        self.observed = observed
        self.expected = expected
        super().__init__(f"bad magic {observed!r} (expected {expected!r})", 0, path)


class TruncatedError(FormatError):
    pass


class DimensionError(FormatError):
    pass

"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument violates an operation's domain contract."""


class BelowRandomFloor(DomainError):
    """A benchmark score sits at or below the discounted random floor.

    Change ratios for higher-is-better metrics are formed on scores with
    4/5 of the random-guess floor subtracted; a score at or below that
    level carries no usable signal.
    """


class ShapeError(DomainError):
    """An array shape is incompatible with the requested operation."""


class FormatError(ValueError):
    """A weights file is malformed.

    ``offset`` is the byte position in the file where the problem was
    detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


class ParseError(ValueError):
    """A metrics or config document failed to parse.

    ``line`` is the 1-based line number of the offending row.
    """

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class StateError(RuntimeError):
    """An operation was invoked in an illegal state, e.g. a nested measurement."""


class SourceError(RuntimeError):
    """An energy source failed to deliver a reading."""

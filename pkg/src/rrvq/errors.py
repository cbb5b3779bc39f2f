"""Exception types shared across the package."""


class RrvqError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(RrvqError, ValueError):
    """An argument violates a documented precondition."""


class CapacityExceededError(InvalidArgumentError):
    """A subsampling request asks for more indices than are available."""


class ParseError(RrvqError):
    """A binary or JSON artifact is structurally malformed."""


class UnsupportedFormatError(RrvqError):
    """A file was recognized but uses an encoding this library does not read."""

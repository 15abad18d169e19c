"""Exception types raised by the pointamp pipeline."""


class PointAmpError(Exception):
    """Base class for every error raised by this package."""


class ParseError(PointAmpError, ValueError):
    """A text record could not be parsed.

    ``line`` is the 1-based line number of the offending record, when known.
    """

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}: "
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


class FormatError(PointAmpError, ValueError):
    """A binary container is malformed."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ConfigError(PointAmpError, ValueError):
    pass

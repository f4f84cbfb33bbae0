"""Exception hierarchy shared by the library and the CLI.

Each class maps to one CLI exit code (see ``gcdm.cli``).
"""


class GCDMError(Exception):
    """Base class for all library errors."""


class ParseError(GCDMError, ValueError):
    """A config or fixture file could not be parsed.

    ``location`` carries a human readable ``file:line [section] key`` hint
    when one is available.
    """

    def __init__(self, message, location=None):
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)


class ConstraintError(GCDMError, ValueError):
    """A parameter violates a documented constraint."""


class InvariantError(GCDMError):
    """A runtime invariant check failed."""

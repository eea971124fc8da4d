"""Exception hierarchy shared by every module."""


class AndersonLabError(Exception):
    """Base class for all errors raised by this package."""


class EmptyLattice(AndersonLabError, ValueError):
    pass


class UnsupportedDomain(AndersonLabError, ValueError):
    pass


class LatticeMismatch(AndersonLabError, ValueError):
    pass


class EmptyWindow(AndersonLabError, ValueError):
    """A parameter window (an open interval) is empty.

    ``interval`` holds the offending ``(low, high)`` pair so callers can
    report the legal range.
    """

    def __init__(self, message, interval=None):
        super().__init__(message)
        self.interval = interval


class TooLarge(AndersonLabError, ValueError):
    pass


class NoConvergence(AndersonLabError, RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class DegenerateEigenvalue(AndersonLabError, ValueError):
    pass


class DegeneracyOnPath(DegenerateEigenvalue):
    pass


class DegenerateSample(AndersonLabError, ValueError):
    pass


class ConfigError(AndersonLabError, ValueError):
    """Config validation failed; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))

"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class ParseError(ValueError):
    """A file could not be parsed. Carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class InfeasibleError(RuntimeError):
    """A scheduling problem admits no feasible plan."""


class BracketError(RuntimeError):
    """Subsidy search could not bracket a passive/active switch."""


class SearchSpaceError(ValueError):
    """Brute-force enumeration would exceed the size guard."""

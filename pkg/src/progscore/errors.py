"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(ArithmeticError):
    """A numerical procedure failed (factorization, degenerate estimates)."""


class DegenerateScoresError(NumericalError):
    """Progression scores carry no spread, so trajectories are unidentified."""


class StandardizationError(NumericalError):
    """Baseline scores have zero spread; the score scale cannot be anchored."""

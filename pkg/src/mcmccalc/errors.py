"""Exception types shared across the library.

Every failure mode the public operations can hit maps to one of these, so
callers (and the command line driver) can tell bad inputs apart from broken
internal state without string matching.
"""


class InvalidInputError(ValueError):
    """Raised when an argument is malformed (NaN values, shape mismatch, ...)."""


class RangeError(ValueError):
    """Raised when a scalar argument falls outside its documented interval."""


class PreconditionError(ValueError):
    """Raised when a mathematical precondition fails (e.g. an unbounded
    start-to-target ratio, or a balancing rule with no derivative)."""


class InternalConsistencyError(RuntimeError):
    """Raised when an internally computed quantity violates an invariant
    that should hold by construction (negative rejection mass, ...)."""


class ResourceLimitError(RuntimeError):
    """Raised when an iterative routine exceeds its configured budget."""


class DegenerateWeightsError(ValueError):
    """Raised when a reweighting step meets an all-zero weight vector."""


class ConfigError(ValueError):
    """Raised by the config loader; carries the full list of problems."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))

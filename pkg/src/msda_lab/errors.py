class PreconditionError(ValueError):
    """An operation was called with inputs outside its contract (shapes, ranges, emptiness)."""


class DomainError(ValueError):
    """A numeric input lies outside an operation's mathematical domain (e.g. log of a non-positive value)."""


class ParseError(ValueError):
    """A dataset, config or checkpoint file could not be parsed."""

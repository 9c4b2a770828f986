"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A precondition on an argument was violated."""


class DegenerateInput(ValueError):
    """The input is well-formed but the quantity is undefined for it."""


class NumericalFailure(RuntimeError):
    """A non-finite value appeared during an iterative computation."""

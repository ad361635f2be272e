"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class IllegalStateError(RuntimeError):
    """An operation was invoked in a state where it is not allowed."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in parameters or gradients."""

"""Exception hierarchy shared by every module of the package."""


class FCMError(Exception):
    """Base class for all attractor-FCM errors."""


class DimensionError(FCMError, ValueError):
    """Array shapes do not agree with the concept count."""


class InvariantError(FCMError, ValueError):
    """A domain invariant (mask, group partition, range) is violated."""


class DivergenceError(FCMError, ArithmeticError):
    """A non-finite value appeared while iterating the dynamics.

    ``step`` is the dynamics step at which it was detected and ``epoch`` is
    filled in by the learners when the failure happens inside training.
    """

    def __init__(self, message, step=None, epoch=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch

    def __str__(self):
        msg = super().__str__()
        if self.epoch is not None:
            msg = f"{msg} (epoch {self.epoch})"
        return msg


class NoConvergenceError(FCMError, RuntimeError):
    """Newton and its fallback both failed to reach the tolerance."""

    def __init__(self, message, best_residual, best_state=None):
        super().__init__(message)
        self.best_residual = best_residual
        self.best_state = best_state


class PreconditionError(FCMError, ValueError):
    """An operation was called on inputs that violate its precondition."""


class SchemaError(FCMError, ValueError):
    """A scenario or report file does not match the documented schema."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field

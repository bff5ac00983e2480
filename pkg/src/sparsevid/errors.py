"""Exception types shared across the package."""


class InputRejected(ValueError):
    """An argument failed validation (shape mismatch, out-of-range value, ...)."""


class ContractViolation(RuntimeError):
    """An operation was called in a state its contract forbids."""


class InvalidStart(RuntimeError):
    """An episode start state is already terminal; the caller must resample."""


class TrainingFailure(RuntimeError):
    """A trainable component did not reach its required quality bar."""


class TrainingDiverged(RuntimeError):
    """Optimization produced non-finite losses."""


class DirectionUnusable(RuntimeError):
    """No boundary crossing could be bracketed along a search direction."""


class InitializationFailure(RuntimeError):
    """No attack candidate produced a usable starting direction."""

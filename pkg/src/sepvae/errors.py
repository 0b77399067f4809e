"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, range, finiteness)."""


class ConfigError(ValueError):
    """A configuration failed validation. ``fields`` lists the offending keys."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss term."""

    def __init__(self, term, epoch, step, value):
        super().__init__(
            f"non-finite loss term {term!r}={value} at epoch {epoch}, step {step}"
        )
        self.term = term
        self.epoch = epoch
        self.step = step


class DataLoadError(OSError):
    """An on-disk dataset could not be read."""


class DegenerateProbeError(ValueError):
    """A probe cannot be fit because its training targets carry no signal."""

"""Exception and warning types shared across the package."""


class RankVolError(Exception):
    """Base class for all rankvol errors."""


class InvalidInputError(RankVolError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class NumericalBlowupError(RankVolError):
    """Simulation produced a non-finite state."""

    def __init__(self, message, step_index=None, time=None):
        super().__init__(message)
        self.step_index = step_index
        self.time = time


class IngestionError(RankVolError):
    """Raw panel data cannot be turned into a valid panel."""

    def __init__(self, message, date=None):
        super().__init__(message)
        self.date = date


class InconsistentInputsError(RankVolError):
    """Estimator inputs do not come from a common panel."""


class BankruptcyError(RankVolError):
    """A portfolio's one-step return reached -100% under the simple recursion."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class DegenerateHorizonError(RankVolError):
    """Relative-arbitrage horizon is undefined for the given variance vector."""


class DataQualityError(RankVolError):
    """Strict mode refused data that would otherwise only trigger a warning."""


class PartialResultError(RankVolError):
    """Some Monte-Carlo paths failed; the partial result is attached."""

    def __init__(self, message, failed_paths=(), partial=None):
        super().__init__(message)
        self.failed_paths = list(failed_paths)
        self.partial = partial


class DataQualityWarning(UserWarning):
    """Non-fatal data issue (skipped increments, substituted members, ...)."""

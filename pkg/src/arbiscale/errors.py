"""Exception types shared across the toolkit."""


class InvalidArgumentError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Raised when a loss, gradient, or tensor turns non-finite.

    ``context`` carries whatever step metadata was available (step, t, ...).
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss.

    ``last_good`` holds the parameter state dicts from the last finite step so
    callers can checkpoint them before aborting.
    """

    def __init__(self, message, step=None, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


class RenderResourceError(MemoryError):
    def __init__(self, query_batch):
        super().__init__(
            f"out of memory while rendering with query_batch={query_batch}; "
            f"retry with a smaller query_batch (e.g. {max(1, query_batch // 4)})"
        )
        self.query_batch = query_batch

"""Exception types shared across the package.

Everything derives from ValueError or RuntimeError so callers that do not
care about the fine-grained category can still catch the usual builtins.
"""


class InvalidParameterError(ValueError):
    """An argument violates its documented bounds (e.g. T < 1, beta out of range)."""


class DimensionMismatchError(ValueError):
    """Two arrays that must share a shape or dimension do not."""


class DegenerateTimeError(ValueError):
    """A time index where the requested operation is undefined (alpha_bar 0 or 1)."""


class EmptyConditionError(ValueError):
    """A label filter that matches no mixture component."""


class DivergenceError(RuntimeError):
    """Training or sampling produced non-finite values; message carries the step index."""


class ConfigError(ValueError):
    """One or more invalid configuration entries.

    Collects every problem found during validation so a bad config is
    reported in full rather than one key at a time.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))

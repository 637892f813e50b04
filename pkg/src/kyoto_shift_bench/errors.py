"""Exception taxonomy shared by every module.

Operational failures derive from ``BenchError`` (a ``RuntimeError``, which is
what the CLI catches). Errors caused by bad inputs also derive from
``ValueError`` so library callers can treat them as argument errors.
"""


class BenchError(RuntimeError):
    """Root of all errors raised by kyoto-shift-bench."""


class UnknownLabelCode(BenchError, ValueError):
    def __init__(self, code: object):
        super().__init__(f"Unknown label code {code!r}; expected one of 1, -1, -2.")
        self.code = code


class MalformedDataset(BenchError):
    """Too many rows of a delimited file failed to parse."""


class InvalidConfig(BenchError, ValueError):
    pass


class NegativeInput(BenchError, ValueError):
    pass


class EmptyInput(BenchError, ValueError):
    pass


class NoRecordsForYear(BenchError):
    def __init__(self, year: int, what: str = "records"):
        super().__init__(f"No {what} found for year {year}.")
        self.year = year


class InsufficientAnomalySupply(BenchError):
    pass


class SupportMismatch(BenchError, ValueError):
    pass


class EmptyClassSubset(BenchError):
    pass


class NotFitted(BenchError):
    def __init__(self, name: str):
        super().__init__(f"{name} must be fitted before scoring.")


class KTooLarge(BenchError, ValueError):
    pass


class EmptyMask(BenchError, ValueError):
    pass


class ConfigMismatch(BenchError, ValueError):
    pass


class VocabularyMismatch(BenchError):
    pass


class SingleClass(BenchError, ValueError):
    pass


class ArtifactMismatch(BenchError):
    """An artifact's embedded hash does not match its contents or config."""


class NoConvergence(UserWarning):
    """Sinkhorn stopped at ``max_iters`` above the marginal tolerance."""


class DegenerateCovariance(UserWarning):
    """Fewer principal components than requested carry variance."""

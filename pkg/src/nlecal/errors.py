"""Exception hierarchy for the toolkit.

Each family carries the process exit code the CLI maps it to, so shell
pipelines can tell configuration mistakes (1) from bad data (2), transport
failures (3), and numeric breakdowns (4).
"""


class NlecalError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(NlecalError):
    """Invalid usage or configuration."""

    exit_code = 1


class DataError(NlecalError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class ParseError(DataError):
    """A line of an input file could not be parsed."""

    def __init__(self, message: str, path=None, line_no: int | None = None):
        self.path = path
        self.line_no = line_no
        loc = ""
        if path is not None:
            loc = f"{path}:"
        if line_no is not None:
            loc = f"{loc}{line_no}: "
        elif loc:
            loc = f"{loc} "
        super().__init__(f"{loc}{message}")


class ValidationError(DataError):
    """Structurally parseable input that violates an invariant."""


class EmptyMetaError(DataError):
    """Aggregation produced no sentences for a pair."""


class UnparseableScoreError(DataError):
    """No in-range integer score could be extracted from a generation."""


class UnparseablePairError(DataError):
    """Every sampled prediction for a pair failed to parse."""


class InsufficientDataError(DataError):
    """Too few data points for the requested computation."""


class TransportError(NlecalError):
    """Network-level failure after exhausting the retry budget."""

    exit_code = 3

    def __init__(self, message: str, partial_results: int = 0):
        self.partial_results = partial_results
        super().__init__(f"{message} (partial results: {partial_results})")


class EndpointError(TransportError):
    """The remote endpoint answered with a non-success HTTP status."""

    def __init__(self, status: int, detail: str = ""):
        self.status = status
        msg = f"endpoint returned HTTP {status}"
        if detail:
            msg = f"{msg}: {detail}"
        NlecalError.__init__(self, msg)
        self.partial_results = 0


class ProtocolError(TransportError):
    """The remote scoring service violated the wire contract."""

    def __init__(self, message: str, missing_ids=()):
        self.missing_ids = tuple(missing_ids)
        if self.missing_ids:
            message = f"{message}: {', '.join(self.missing_ids)}"
        NlecalError.__init__(self, message)
        self.partial_results = 0


class NumericError(NlecalError):
    """Numerical failure in a kernel or optimizer."""

    exit_code = 4


class NumericInputError(NumericError):
    """Non-finite values fed to a numeric kernel."""


class SaturationError(NumericError):
    """An exponent exceeded the overflow guard."""

    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(f"exponent overflow at index {index} (w*s+b = {value:.3g} > 700)")


class FitError(NumericError):
    """An optimizer left the finite domain."""


class TrainingError(NumericError):
    """Scorer training diverged."""

    def __init__(self, message: str, last_finite_epoch: int):
        self.last_finite_epoch = last_finite_epoch
        super().__init__(f"{message} (last finite epoch: {last_finite_epoch})")


class UndefinedCorrelationError(NumericError):
    """Correlation undefined because one argument has zero variance."""

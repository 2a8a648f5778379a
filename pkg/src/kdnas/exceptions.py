"""Exception hierarchy shared across the package."""


class KDNASError(Exception):
    """Base class for all package errors."""


class ShapeError(KDNASError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(KDNASError, FloatingPointError):
    """Non-finite values reached an operation that cannot handle them."""


class ConfigurationError(KDNASError, ValueError):
    """An architecture, strategy or config value is invalid."""


class ContractViolation(KDNASError, ValueError):
    """A documented precondition on an argument was not met."""


class InputError(KDNASError, ValueError):
    """Bad user-supplied data (token ids, states, counts)."""


class ParseError(InputError):
    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at position {position})")
        self.position = position


class CorpusError(KDNASError, OSError):
    """Corpus source is unreadable or empty."""


class TrainingDiverged(KDNASError, RuntimeError):
    def __init__(self, step, loss=float("nan")):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class CalibrationFailed(KDNASError, RuntimeError):
    def __init__(self, message, table):
        super().__init__(message)
        self.table = table


class SearchExhausted(KDNASError, RuntimeError):
    """Fewer unexplored states remain than an episode needs."""


class ConfigMismatch(KDNASError, RuntimeError):
    def __init__(self, diff):
        lines = [f"  {k}: logged={a!r} requested={b!r}" for k, (a, b) in sorted(diff.items())]
        super().__init__("search config differs from the logged run:\n" + "\n".join(lines))
        self.diff = diff


class MeasurementConflict(KDNASError, RuntimeError):
    """Latency measurement attempted while candidate evaluations are running."""

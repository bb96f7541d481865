"""Exception hierarchy shared across the package.

Contract violations (bad arguments, broken preconditions, inconsistent state)
raise ContractError subclasses; numeric blow-ups (NaN/Inf) raise NumericError.
The CLI maps these onto distinct exit codes.
"""


class SsaAsrError(Exception):
    """Base class for all package errors."""


class ContractError(SsaAsrError):
    """A documented precondition or invariant was violated by the caller."""


class DimensionError(ContractError):
    """Shape mismatch between operands; message names both shapes."""


class ConfigMismatchError(ContractError):
    """A cache or checkpoint was built under a different model configuration."""


class SessionStateError(ContractError):
    """A streaming session or encoder cache was used after being closed."""


class InfeasibleTargetError(ContractError):
    """The target sequence cannot be aligned within the given frame count."""


class UndefinedRateError(SsaAsrError):
    """A rate with a zero denominator (no reference words / no scored time)."""


class NumericError(SsaAsrError):
    """A primitive produced or received a non-finite value."""


class TrainingDivergedError(NumericError):
    """Training hit a non-finite loss; carries step, lr and grad norm."""

    def __init__(self, message: str, step: int, lr: float, grad_norm: float):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm


class ParseError(SsaAsrError):
    """An input file violated its documented schema."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f" ({path}" + (f", line {line}" if line is not None else "") + ")"
        super().__init__(message + loc)
        self.path = path
        self.line = line

"""Exception hierarchy shared by every module.

Validation problems (bad input, unidentifiable designs, violated
preconditions) derive from :class:`ValidationError`; failures of a numerical
procedure (non-convergence, singular systems, dead samplers) derive from
:class:`NumericalError`. The CLI maps the two families to exit codes 2 and 3.
"""


class Nof1Error(Exception):
    """Base class for all package errors."""

    def to_record(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class ValidationError(Nof1Error, ValueError):
    """Input violates a structural requirement."""


class ProtocolError(ValidationError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "invalid protocol")

    def to_record(self) -> dict:
        rec = super().to_record()
        rec["violations"] = self.violations
        return rec


class CsvFormatError(ValidationError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)

    def to_record(self) -> dict:
        rec = super().to_record()
        rec["row"] = self.row
        return rec


class UnidentifiableError(ValidationError):
    """The design cannot inform the requested contrast."""


class EnumerationLimitError(ValidationError):
    pass


class NumericalError(Nof1Error, RuntimeError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)

    def to_record(self) -> dict:
        rec = super().to_record()
        rec["trace"] = self.trace[-10:]
        return rec


class SamplerError(NumericalError):
    pass

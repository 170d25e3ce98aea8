"""Exception hierarchy shared by every module.

The CLI maps any :class:`KSError` to exit code 1 and prints ``error: <Kind>: <message>``.
"""


class KSError(Exception):
    """Base class for domain errors."""


class ShapeError(KSError, ValueError):
    pass


class ConfigError(KSError, ValueError):
    pass


class EmptyContextError(KSError, ValueError):
    """Raised when an attention call has no valid key position."""


class NumericalDomainError(KSError, ArithmeticError):
    pass


class ContractError(KSError, RuntimeError):
    """A caller violated an operation precondition."""


class FormatError(KSError, ValueError):
    """Bad magic bytes or unsupported version in a KSEF file."""


class CorruptFileError(KSError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SchemaError(KSError, ValueError):
    pass


class DivergenceError(KSError, RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last parameters that produced a finite loss.
    """

    def __init__(self, message: str, checkpoint=None, diagnostic=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.diagnostic = diagnostic or {}

"""Exception hierarchy shared by the codec, model and transport layers."""


class AcomError(Exception):
    """Base class for every error raised by this package."""


class ContractError(AcomError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(AcomError, ValueError):
    """Model or run configuration is inconsistent."""


class CodebookMismatchError(AcomError):
    """Hash of the loaded codebook (or model) differs from the one referenced."""

    def __init__(self, message="codebook mismatch"):
        super().__init__(message)


class FramingError(AcomError):
    """A byte stream is truncated or malformed.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(AcomError):
    """A peer violated the split-inference session protocol."""


class ProtocolTimeout(ProtocolError, TimeoutError):
    """The peer stopped sending before the session finished."""


class TrainingDiverged(AcomError, ArithmeticError):
    """A training step produced a non-finite loss or gradient."""

"""Exception hierarchy.

Every error raised by the library derives from :class:`QsrError` so the CLI
can report it with a stable prefix. Most also derive from the builtin that
best describes them, which keeps ``except ValueError`` call sites working.
"""


class QsrError(Exception):
    """Base class for all library errors."""


class DimensionError(QsrError, ValueError):
    pass


class ParameterError(QsrError, ValueError):
    pass


class ConfigError(QsrError, ValueError):
    pass


class InitError(QsrError, ValueError):
    pass


class ContractError(QsrError, ValueError):
    """Input violates a documented precondition (e.g. pixels outside [0, 1])."""


class CalibrationError(QsrError, ValueError):
    pass


class EncodingError(QsrError, KeyError):
    """Quantization encodings missing or inconsistent with the model."""

    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class TransformError(QsrError, ValueError):
    pass


class LoadError(QsrError, IOError):
    pass


class VersionMismatchError(LoadError):
    pass


class TruncatedBlobError(LoadError):
    pass


class ChecksumError(LoadError):
    pass


class FormatError(QsrError, ValueError):
    """Unsupported image or file format."""


class DataError(QsrError, ValueError):
    pass


class StateError(QsrError, RuntimeError):
    pass


class DivergenceError(QsrError, FloatingPointError):
    pass

"""Exception types shared across the package.

Every error carries a human-readable message; the CLI maps these onto
process exit codes (usage 1, data 2, numeric abort 3).
"""


class SegBridgeError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SegBridgeError):
    """Shapes or ranks incompatible with the requested operation."""


class GraphError(SegBridgeError):
    """Invalid use of the autograd graph (e.g. backward on a non-scalar)."""


class NumericError(SegBridgeError):
    """Non-finite values where finite ones are required."""


class ConfigError(SegBridgeError):
    """Unknown, missing, or out-of-range configuration values."""


class ContractError(SegBridgeError):
    """A caller violated a documented precondition."""


class CapacityError(SegBridgeError):
    """More inputs than a component is configured to accept."""


class DegeneratePromptError(SegBridgeError):
    """A visual prompt covers no feature cells after downsampling."""


class AssemblyError(SegBridgeError):
    """Token sequence assembly failed (unbound slot, duplicate image)."""


class TruncationError(SegBridgeError):
    """An assembled sequence exceeds the model's maximum length."""


class ParseError(SegBridgeError):
    """Malformed serialized data.

    Carries the offending line number when the source is line-oriented.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericAbort(SegBridgeError):
    """Training aborted on a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}

"""Exception types shared across the package.

Everything derives from :class:`MadtpError` so the CLI can map failures to
exit codes in one place.
"""


class MadtpError(Exception):
    pass


class InvalidArgument(MadtpError, ValueError):
    pass


class DegenerateInput(MadtpError, ValueError):
    pass


class UnsupportedOperation(MadtpError, RuntimeError):
    pass


class FormatError(MadtpError, ValueError):
    """Attention dump with wrong magic bytes or version."""


class CorruptFileError(MadtpError, ValueError):
    """Attention dump whose declared shapes disagree with its payload."""


class NonStochasticError(MadtpError, ValueError):
    """Attention rows too far from summing to one to be repaired."""


class NonConvergence(MadtpError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class NonFiniteLoss(MadtpError, FloatingPointError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}

"""Exception hierarchy shared by every capskit module."""


class CapsKitError(Exception):
    pass


class InvalidArgument(CapsKitError, ValueError):
    """Shapes or values that violate an operation's preconditions."""


class ConfigError(CapsKitError, ValueError):
    """Architecture / routing / training configuration that cannot be honoured."""


class FormatError(CapsKitError):
    """A dataset or checkpoint file does not match its binary layout."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    """Checkpoint written by an incompatible format version."""


class OracleError(CapsKitError):
    """The finite-difference oracle hit a non-finite function value."""

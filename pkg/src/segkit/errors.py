"""Exception types shared across segkit."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class T4FormatError(ValueError):
    """A ``.t4`` tensor file is malformed or truncated."""


class CheckpointError(ValueError):
    """Base class for ``.mck`` load failures."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    """Checkpoint entries do not match the target architecture."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""

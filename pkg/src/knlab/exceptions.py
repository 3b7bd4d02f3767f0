class KnLabError(Exception):
    """Base class for errors raised by knlab."""


class DataError(KnLabError, ValueError):
    """Bad or inconsistent input data (corpora, maps, records, files)."""


class ShapeError(DataError):
    """Array shapes or names do not match what a computation declared."""


class NumericError(KnLabError, ArithmeticError):
    """A computation produced a non-finite value or failed to converge."""


class CheckpointError(DataError):
    """A checkpoint file is truncated, corrupted or of an unknown version."""

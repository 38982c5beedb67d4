"""Exception hierarchy shared by every panflow module."""


class PanFlowError(Exception):
    """Base class for all errors raised by panflow."""


class ShapeError(PanFlowError, ValueError):
    """Operands have incompatible dimensions."""


class ConfigError(PanFlowError, ValueError):
    """A model, training or data configuration is invalid."""


class NumericOverflowError(PanFlowError, FloatingPointError):
    """An operation produced NaN or Inf.

    ``where`` names the operation (and block or sample index when known).
    """

    def __init__(self, where, detail=""):
        self.where = where
        msg = f"non-finite values produced by {where}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TrainingDivergedError(NumericOverflowError):
    """Training hit a non-finite loss; parameters were rolled back."""

    def __init__(self, where, epoch, detail=""):
        self.epoch = epoch
        super().__init__(where, detail)


class FormatError(PanFlowError, ValueError):
    """A binary file (raster or checkpoint) could not be parsed."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionError(FormatError):
    """Header dimensions are zero or too large to be plausible."""


class UnsupportedVersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass

"""Exception hierarchy shared by the library and the command line."""


class DaRetinexError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DaRetinexError, ValueError):
    """Tensor shapes or channel counts do not match an operation's contract."""


class PaddingError(ShapeError):
    """Spatial size is not a multiple of the network's downsampling factor."""


class ImageFormatError(DaRetinexError):
    """Image file decodes but uses an unsupported mode or bit depth."""


class DatasetError(DaRetinexError):
    """Problems with a paired dataset layout."""


class PairingError(DatasetError):
    def __init__(self, offenders, message=None):
        self.offenders = sorted(offenders)
        super().__init__(message or "unmatched basenames: " + ", ".join(self.offenders))


class EmptyDatasetError(DatasetError):
    pass


class CheckpointError(DaRetinexError):
    """Checkpoint archive is corrupt or truncated."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint architecture does not match the network it is loaded into."""


class WeightLoadError(CheckpointError):
    """Pretrained weights are missing or have unexpected shapes."""


class NumericalError(DaRetinexError, ArithmeticError):
    """Non-finite gradients or a diverging loss."""

    def __init__(self, message, name=None, batch_ids=None):
        self.name = name
        self.batch_ids = list(batch_ids or [])
        super().__init__(message)


class DegenerateInputError(DaRetinexError, ValueError):
    """A metric has nothing to measure (e.g. every pixel excluded)."""

"""Exception hierarchy shared across the package.

DataError and ModelError map to the CLI exit codes 3 and 4.
"""


class IcrError(Exception):
    pass


class DataError(IcrError):
    """Problems with datasets, files, or input volumes."""


class VolumeFormatError(DataError):
    """Malformed IVOL file: bad header, payload size, or non-finite data."""


class GridMismatchError(DataError):
    """Operands live on different grids."""


class DegenerateVolumeError(DataError):
    """Input volume has no usable signal (e.g. zero variance)."""


class ModelError(IcrError):
    """Problems with network configuration, weights, or checkpoints."""


class CheckpointError(ModelError):
    pass


class ChannelMismatchError(ModelError):
    pass

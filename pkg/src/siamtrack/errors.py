"""Exception taxonomy shared across the package."""


class SiamTrackError(Exception):
    """Base class for all siamtrack errors."""


class ConfigError(SiamTrackError):
    """Invalid configuration value or file."""


class ShapeError(SiamTrackError):
    """Tensor/grid shapes incompatible with the requested operation."""


class UsageError(SiamTrackError):
    """Operation called outside its contract (bad arguments, bad state)."""


class NumericError(SiamTrackError):
    """Numeric overflow or non-finite result where finiteness is required."""


class DatasetError(SiamTrackError):
    """Sequence dataset missing frames or malformed ground truth."""


class DivergenceError(SiamTrackError):
    """Training loss became non-finite."""

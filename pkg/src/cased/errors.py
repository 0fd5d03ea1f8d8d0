"""Exception types shared across the package."""


class FileFormatError(Exception):
    """Raised when an on-disk artifact is malformed or inconsistent."""


class NoPositivePatchesError(ValueError):
    """Raised when a dataset contains no positive patches but the sampler needs them."""


class NonFiniteGradientError(RuntimeError):
    """Raised when an optimizer step receives a NaN or infinite gradient."""


class StaleCacheError(RuntimeError):
    """Raised when a backward pass is attempted against weights updated since the forward pass."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

"""Exception types shared across the package."""


class CountMismatch(ValueError):
    """Two containers that must have matching lengths do not."""


class TooFewPoints(ValueError):
    """A point cloud has fewer points than an operation requires."""


class DegenerateBeacons(ValueError):
    """Beacon geometry is (near-)coplanar, so multilateration is ill-posed."""


class DegenerateConfiguration(ValueError):
    """Point correspondences are rank-deficient (collinear or coincident)."""


class AllZeroWeights(ValueError):
    """Every alignment weight is zero."""


class NoConvergence(RuntimeError):
    """An iterative solver failed to reduce its residual acceptably."""


class WidthNotDivisible(ValueError):
    """Feature width is not divisible by the attention head count."""


class SampleTooLarge(ValueError):
    """Requested sample size exceeds the available point count."""


class NonFiniteValue(ArithmeticError):
    """A tensor operation produced NaN or Inf."""


class NonFiniteLoss(RuntimeError):
    """Training hit a non-finite loss; carries epoch/step context in the message."""


class CheckpointFormatError(ValueError):
    """Checkpoint file is missing, corrupt, or has an unsupported version."""


class DatasetFormatError(ValueError):
    """Dataset directory is missing files, corrupt, or fails its checksums."""


class ConfigError(ValueError):
    """Run configuration contains unknown keys or invalid values."""

"""Exception hierarchy shared by all modules."""


class AtlasegError(Exception):
    """Base class for all atlaseg errors."""


class ConstantImage(AtlasegError):
    """An operation that needs intensity variation got a flat image."""


class DimensionMismatch(AtlasegError):
    """Grids that must share dimensions do not."""


class DegenerateTarget(AtlasegError):
    """Resize target smaller than 2 pixels along an axis."""


class LengthMismatch(AtlasegError):
    """Feature vectors of different lengths were compared."""


class NOutOfRange(AtlasegError):
    """Requested atlas count outside [1, set size]."""


class AllZeroOverlap(AtlasegError):
    """Every raw fusion weight is zero; weights cannot be normalized."""


class EmptyReference(AtlasegError):
    """Reference mask is empty where a non-empty one is required."""


class EmptyMask(AtlasegError):
    """A mask needed for a boundary metric is empty."""


class TooFewSlices(AtlasegError):
    """Volume has fewer slices than the region partition needs."""


class InvalidParams(AtlasegError):
    """Configuration or generator parameters violate an invariant."""


class OasgFormatError(AtlasegError):
    """An OASG file or volume directory failed to parse."""


class NonFiniteLoss(AtlasegError):
    """Registration diverged to a non-finite loss. Carries the trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []

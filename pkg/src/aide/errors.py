"""Exception hierarchy shared by all engine modules."""


class AideError(Exception):
    """Base class for every error raised by this package."""


class InvalidBox(AideError):
    """Box coordinates are degenerate or non-finite."""


class DuplicateCategory(AideError):
    """Category already present in the label space (after normalization)."""


class UnknownCategory(AideError):
    """Category id or name does not resolve in the active label space."""


class EmptyCategory(AideError):
    """A category name was required but the string is empty."""


class DimensionMismatch(AideError):
    """Embedding vectors of different dimensions were combined."""


class EmptyStore(AideError):
    """Operation requires a non-empty embedding store."""


class UnknownImage(AideError):
    """Image id not present in the store or world."""


class AdapterUnavailable(AideError):
    """A remote or simulated adapter failed after exhausting retries."""


class EmptyTrainingSet(AideError):
    """Training was requested with no labels at all."""


class InvalidCount(AideError):
    """A count argument was zero or negative where >= 1 is required."""


class RevisionConflict(AideError):
    """Optimistic-concurrency check failed: the case changed underneath."""


class InvalidTransition(AideError):
    """Verification case state machine does not allow this verdict."""


class UnknownKind(AideError):
    """Cost ledger entry kind is not one of the configured kinds."""


class ConfigError(AideError):
    """Configuration file is missing, malformed, or inconsistent."""


class CorruptManifest(AideError):
    """Run manifest or a persisted artifact failed its digest check."""


class StageOrderError(AideError):
    """A pipeline stage was requested out of order."""

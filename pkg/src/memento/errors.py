"""Exception types shared across the package.

Every error raised on a contract violation derives from :class:`MementoError`
so callers can catch the whole family with one handler.
"""


class MementoError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(MementoError):
    """Two vectors (or a vector and an index) disagree on dimensionality."""


class NonFinite(MementoError):
    """An input contains NaN or infinity."""


class InsufficientData(MementoError):
    """Not enough observations to compute the requested statistic."""


class InvalidWeights(MementoError):
    """MMR weight configuration violates 0 <= alpha, beta and alpha + beta <= 1."""


class MissingAdEmbedding(MementoError):
    """beta > 0 requires an ad-side query embedding."""


class UntrainedTower(MementoError):
    """Row embedding was requested before the two-tower model was trained."""


class BudgetExceedsCorpus(MementoError):
    """Replay budget is larger than the available historical rows."""


class InvalidPlan(MementoError):
    """Second-pass training plan violates its invariants."""


class EmptyBatch(MementoError):
    """A prediction batch must contain at least one example."""


class DegenerateLabels(MementoError):
    """All labels in a batch are identical; normalized entropy is undefined."""


class EmptyHoldout(MementoError):
    """Forgetting evaluation requires non-empty holdout sets."""


class InvalidConfig(MementoError):
    """Generator or experiment configuration failed validation."""


class SnapshotFormatError(MementoError):
    """A snapshot or doc file has a bad magic number, layout, or checksum."""


class InvariantViolation(MementoError):
    """A runtime experiment invariant (e.g. the Bayes floor) was violated."""

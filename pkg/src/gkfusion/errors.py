"""Exception hierarchy shared across the pipeline.

Data/format problems and contract violations raise subclasses of
:class:`GkfusionError` so the CLI can map them onto stable exit codes.
"""


class GkfusionError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(GkfusionError):
    """A caller-supplied value violates an operation's preconditions."""


class DimensionError(GkfusionError):
    """Vector or matrix shapes do not line up."""


class ZeroNormError(GkfusionError):
    """Cosine similarity requested for a zero-norm vector."""


class StateError(GkfusionError):
    """An operation was invoked with stale or missing cached state."""


class FormatError(GkfusionError):
    """A file failed to parse, or violated its format's invariants."""


class MissingEmbeddingError(GkfusionError):
    """A lookup for an id that the embedding store does not contain."""

    def __init__(self, key: str):
        super().__init__(f"no embedding stored for key {key!r}")
        self.key = key


class PredictionError(GkfusionError):
    """Relation prediction failed for every candidate relation."""


class TrainingDivergedError(GkfusionError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        detail = message or "loss became non-finite"
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch

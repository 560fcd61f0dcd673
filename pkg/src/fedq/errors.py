"""Exception types shared across the package."""

from __future__ import annotations


class FedqError(Exception):
    """Base class for package-specific errors."""


class FileUnreadable(FedqError):
    """A required file is missing or cannot be opened."""


class SchemaMismatch(FedqError):
    """Input data does not match the declared column schema."""


class EmptyDataset(FedqError):
    """No usable rows were produced."""


class TooFewSamples(FedqError):
    """Fewer samples than the operation requires."""


class EmptyCluster(FedqError):
    """A cluster id in the expected range has zero members."""


class InvalidSpec(FedqError):
    """A synthetic-data specification is malformed."""


class DimensionMismatch(FedqError):
    """Vector or matrix dimensions do not line up."""


class ZeroTotalWeight(FedqError):
    """All sample weights in a batch are zero."""


class EmptyPosteriors(FedqError):
    """A posterior matrix with zero rows was supplied."""


class AllZeroRow(FedqError):
    """Every mixture weight in a row is zero."""


class ShapeMismatch(FedqError):
    """Parameter records with incompatible shapes were combined."""


class EmptyBuffer(FedqError):
    """Sampling was requested from an empty replay buffer."""


class ConfigInvalid(FedqError):
    """A run or command configuration failed validation."""


class NumericalFailure(FedqError):
    """A non-finite value appeared in model state or metrics."""

    def __init__(self, message: str, round_index: int | None = None):
        super().__init__(message)
        self.round_index = round_index
